"""Render a few synthetic bodies and look at them in the terminal.

Run:  python demos/01_synthetic_bodies.py
"""
import numpy as np

from poseforest.depthcore import project
from poseforest.synthdata import JOINT_NAMES, SCENARIOS, BodyModel, default_camera, render, sample_pose

model = BodyModel()
cam = default_camera(160, 120)

# Each scenario draws joint angles from its own ranges. Rendering ray-casts the
# capsule body into a millimetre depth map and flags joints that other body
# parts hide from the camera.
for name in SCENARIOS:
    pose = sample_pose(model, np.random.default_rng(4), name, cam, (160, 120))
    img, skel = render(pose, cam, (160, 120), model=model)
    print(f"\n== {name}: {img.foreground.mean():.1%} of pixels on the body, "
          f"hidden joints: {[JOINT_NAMES[j] for j in np.flatnonzero(~skel.visible)] or 'none'}")

    # coarse ASCII view: nearer surfaces print darker
    shades = " .:-=+*#%@"
    small = img.depths[::6, ::3].astype(float)
    fg = small < img.background_depth
    lo, hi = (small[fg].min(), small[fg].max()) if fg.any() else (0, 1)
    marks = np.floor(project(skel.positions, cam) + 0.5).astype(int)
    rows = []
    for r in range(small.shape[0]):
        line = ""
        for c in range(small.shape[1]):
            if not fg[r, c]:
                line += " "
            else:
                t = 1 - (small[r, c] - lo) / max(hi - lo, 1)
                line += shades[1 + int(t * (len(shades) - 2))]
        rows.append(list(line))
    for j, (x, y) in enumerate(marks):
        r, c = y // 6, x // 3
        if 0 <= r < len(rows) and 0 <= c < len(rows[0]):
            rows[r][c] = "o" if skel.visible[j] else "x"
    print("\n".join("".join(r) for r in rows))
print("\n(o = visible joint, x = hidden joint)")
