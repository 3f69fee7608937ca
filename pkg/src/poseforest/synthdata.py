"""Synthetic labelled depth images of an articulated capsule body.

The body is a 16-joint skeleton posed by forward kinematics and drawn as a
union of capsules (segments with a radius) with an analytic ray caster.  Each
rendered image comes with the camera-space ground-truth joints and a
per-joint visibility flag.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .depthcore import (BACKGROUND_DEPTH, CameraIntrinsics, DepthImage, project,
                        write_dph)

JOINT_NAMES = (
    "head", "neck", "spine", "pelvis",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
J = len(JOINT_NAMES)
_IDX = {name: i for i, name in enumerate(JOINT_NAMES)}

# body frame: x to the subject's left (camera right when facing it), y up,
# z out of the chest towards the camera
_PARENT = {
    "pelvis": None, "spine": "pelvis", "neck": "spine", "head": "neck",
    "l_shoulder": "neck", "l_elbow": "l_shoulder", "l_wrist": "l_elbow",
    "r_shoulder": "neck", "r_elbow": "r_shoulder", "r_wrist": "r_elbow",
    "l_hip": "pelvis", "l_knee": "l_hip", "l_ankle": "l_knee",
    "r_hip": "pelvis", "r_knee": "r_hip", "r_ankle": "r_knee",
}
_REST_OFFSET = {
    "pelvis": (0.0, 0.0, 0.0), "spine": (0.0, 0.24, 0.0), "neck": (0.0, 0.26, 0.0),
    "head": (0.0, 0.22, 0.0),
    "l_shoulder": (0.18, -0.03, 0.0), "l_elbow": (0.28, 0.0, 0.0), "l_wrist": (0.25, 0.0, 0.0),
    "r_shoulder": (-0.18, -0.03, 0.0), "r_elbow": (-0.28, 0.0, 0.0), "r_wrist": (-0.25, 0.0, 0.0),
    "l_hip": (0.10, -0.06, 0.0), "l_knee": (0.0, -0.42, 0.0), "l_ankle": (0.0, -0.40, 0.0),
    "r_hip": (-0.10, -0.06, 0.0), "r_knee": (0.0, -0.42, 0.0), "r_ankle": (0.0, -0.40, 0.0),
}
_BONES = (
    ("pelvis", "spine", 0.13), ("spine", "neck", 0.14), ("neck", "head", 0.05),
    ("head", "head", 0.10),
    ("neck", "l_shoulder", 0.06), ("l_shoulder", "l_elbow", 0.05), ("l_elbow", "l_wrist", 0.045),
    ("l_wrist", "l_wrist", 0.05),
    ("neck", "r_shoulder", 0.06), ("r_shoulder", "r_elbow", 0.05), ("r_elbow", "r_wrist", 0.045),
    ("r_wrist", "r_wrist", 0.05),
    ("pelvis", "l_hip", 0.10), ("l_hip", "l_knee", 0.075), ("l_knee", "l_ankle", 0.055),
    ("pelvis", "r_hip", 0.10), ("r_hip", "r_knee", 0.075), ("r_knee", "r_ankle", 0.055),
)
# joints whose rotation moves their children
ARTICULATIONS = ("pelvis", "spine", "neck", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
                 "l_hip", "l_knee", "r_hip", "r_knee")


@dataclass(frozen=True)
class BodyModel:
    joint_names: tuple[str, ...] = JOINT_NAMES
    parents: tuple[int, ...] = tuple(-1 if _PARENT[n] is None else _IDX[_PARENT[n]]
                                     for n in JOINT_NAMES)
    rest_offsets: np.ndarray = field(
        default_factory=lambda: np.array([_REST_OFFSET[n] for n in JOINT_NAMES]))
    bones: tuple[tuple[int, int, float], ...] = tuple((_IDX[a], _IDX[b], r) for a, b, r in _BONES)

    def __post_init__(self):
        if any(r <= 0 for _, _, r in self.bones):
            raise ValueError("capsule radii must be positive")
        if sum(p < 0 for p in self.parents) != 1:
            raise ValueError("skeleton must have exactly one root")

    @property
    def joint_count(self) -> int:
        return len(self.joint_names)

    def local_radius(self) -> np.ndarray:
        """Largest capsule radius ending at each joint (the surface around it)."""
        r = np.zeros(self.joint_count)
        for a, b, rad in self.bones:
            r[a] = max(r[a], rad)
            r[b] = max(r[b], rad)
        return r


def _rot(angles) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from angles about x, y, z (radians)."""
    ax, ay, az = angles
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _deg(*ranges):
    return tuple((np.radians(lo), np.radians(hi)) for lo, hi in ranges)


@dataclass(frozen=True)
class Scenario:
    """Sampling ranges for one family of poses.

    ``angles`` maps an articulation to ``((lo, hi) about x, about y, about z)``
    in radians; missing articulations stay at zero.  ``yaw`` turns the whole
    body about the vertical axis.  ``depth`` and ``lateral`` place the pelvis.
    """

    name: str
    angles: dict
    yaw: tuple[float, float] = (0.0, 0.0)
    depth: tuple[float, float] = (1.9, 2.8)
    lateral: tuple[float, float] = (-0.3, 0.3)

    def scaled(self, s: float) -> "Scenario":
        """Shrink every range about its midpoint by factor ``s`` (0 collapses it)."""
        def sc(lo, hi):
            mid, half = (lo + hi) / 2, (hi - lo) / 2 * s
            return (mid - half, mid + half)
        angles = {k: tuple(sc(*r) for r in v) for k, v in self.angles.items()}
        return replace(self, angles=angles, yaw=sc(*self.yaw), depth=sc(*self.depth),
                       lateral=sc(*self.lateral))


_LEGS_STILL = {
    "l_hip": _deg((-10, 10), (-5, 5), (-4, 8)), "r_hip": _deg((-10, 10), (-5, 5), (-8, 4)),
    "l_knee": _deg((0, 10), (0, 0), (0, 0)), "r_knee": _deg((0, 10), (0, 0), (0, 0)),
}

SCENARIOS = {
    "standing": Scenario("standing", {
        "pelvis": _deg((-5, 5), (-5, 5), (-3, 3)), "spine": _deg((-5, 5), (-5, 5), (-5, 5)),
        "neck": _deg((-10, 10), (-10, 10), (-5, 5)),
        "l_shoulder": _deg((-10, 10), (-20, 20), (-20, 20)), "l_elbow": _deg((0, 0), (-20, 20), (-5, 5)),
        "r_shoulder": _deg((-10, 10), (-20, 20), (-20, 20)), "r_elbow": _deg((0, 0), (-20, 20), (-5, 5)),
        "l_hip": _deg((-10, 10), (-5, 5), (-6, 6)), "r_hip": _deg((-10, 10), (-5, 5), (-6, 6)),
        "l_knee": _deg((-5, 5), (0, 0), (0, 0)), "r_knee": _deg((-5, 5), (0, 0), (0, 0)),
    }, yaw=(np.radians(-25), np.radians(25))),
    "arms-raised": Scenario("arms-raised", {
        "pelvis": _deg((-5, 5), (-5, 5), (-3, 3)), "spine": _deg((-5, 5), (-10, 10), (-8, 8)),
        "neck": _deg((-15, 15), (-10, 10), (-5, 5)),
        "l_shoulder": _deg((-10, 10), (-30, 30), (35, 80)), "l_elbow": _deg((0, 0), (-10, 10), (0, 70)),
        "r_shoulder": _deg((-10, 10), (-30, 30), (-80, -35)), "r_elbow": _deg((0, 0), (-10, 10), (-70, 0)),
        **_LEGS_STILL,
    }, yaw=(np.radians(-30), np.radians(30))),
    "arms-crossed": Scenario("arms-crossed", {
        "pelvis": _deg((-3, 3), (-5, 5), (-3, 3)), "spine": _deg((-3, 3), (-5, 5), (-3, 3)),
        "neck": _deg((-10, 10), (-10, 10), (-5, 5)),
        "l_shoulder": _deg((-3, 3), (-29, -23), (-84, -78)), "l_elbow": _deg((0, 0), (-28, -22), (-94, -88)),
        "r_shoulder": _deg((-3, 3), (23, 29), (78, 84)), "r_elbow": _deg((0, 0), (22, 28), (78, 84)),
        **_LEGS_STILL,
    }, yaw=(np.radians(-10), np.radians(10))),
    "side-view": Scenario("side-view", {
        "pelvis": _deg((-5, 5), (-5, 5), (-3, 3)), "spine": _deg((-10, 10), (-5, 5), (-5, 5)),
        "neck": _deg((-10, 10), (-10, 10), (-5, 5)),
        "l_shoulder": _deg((-10, 10), (-60, 20), (-75, -40)), "l_elbow": _deg((0, 0), (-60, 0), (0, 0)),
        "r_shoulder": _deg((-10, 10), (-20, 60), (40, 75)), "r_elbow": _deg((0, 0), (0, 60), (0, 0)),
        "l_hip": _deg((-30, 20), (-5, 5), (-4, 8)), "r_hip": _deg((-30, 20), (-5, 5), (-8, 4)),
        "l_knee": _deg((0, 40), (0, 0), (0, 0)), "r_knee": _deg((0, 40), (0, 0), (0, 0)),
    }, yaw=(np.radians(60), np.radians(120))),
    "random": Scenario("random", {
        "pelvis": _deg((-10, 10), (-10, 10), (-8, 8)), "spine": _deg((-20, 20), (-20, 20), (-15, 15)),
        "neck": _deg((-20, 20), (-30, 30), (-10, 10)),
        "l_shoulder": _deg((-30, 30), (-60, 40), (-80, 80)), "l_elbow": _deg((0, 0), (-120, 0), (-10, 10)),
        "r_shoulder": _deg((-30, 30), (-40, 60), (-80, 80)), "r_elbow": _deg((0, 0), (0, 120), (-10, 10)),
        "l_hip": _deg((-50, 30), (-10, 10), (-5, 25)), "r_hip": _deg((-50, 30), (-10, 10), (-25, 5)),
        "l_knee": _deg((0, 70), (0, 0), (0, 0)), "r_knee": _deg((0, 70), (0, 0), (0, 0)),
    }, yaw=(np.radians(-90), np.radians(90))),
}


@dataclass(frozen=True)
class PoseSample:
    angles: dict  # articulation -> (ax, ay, az) radians
    yaw: float
    root: np.ndarray  # pelvis position, camera space (m)
    joints: np.ndarray  # (J, 3) camera-space joint positions (m)
    scenario: str = ""


def _topological_order(parents) -> list[int]:
    order, placed = [], set()
    while len(order) < len(parents):
        for i, p in enumerate(parents):
            if i not in placed and (p < 0 or p in placed):
                order.append(i)
                placed.add(i)
    return order


def forward_kinematics(model: BodyModel, angles: dict, yaw: float, root) -> np.ndarray:
    """Camera-space joint positions (x right, y down, z forward)."""
    n = model.joint_count
    rots = [None] * n
    body = np.zeros((n, 3))
    for i in _topological_order(model.parents):
        p = model.parents[i]
        local = _rot(angles.get(model.joint_names[i], (0.0, 0.0, 0.0)))
        if p < 0:
            rots[i] = _rot((0.0, yaw, 0.0)) @ local
            body[i] = 0.0
        else:
            body[i] = body[p] + rots[p] @ model.rest_offsets[i]
            rots[i] = rots[p] @ local
    cam = np.empty_like(body)
    cam[:, 0] = body[:, 0]
    cam[:, 1] = -body[:, 1]
    cam[:, 2] = -body[:, 2]
    return cam + np.asarray(root, dtype=np.float64)


def _in_frustum(joints, cam: CameraIntrinsics, width, height, margin=4.0) -> bool:
    if np.any(joints[:, 2] <= 0.3):
        return False
    px = project(joints, cam)
    return bool(np.all((px[:, 0] >= margin) & (px[:, 0] <= width - 1 - margin)
                       & (px[:, 1] >= margin) & (px[:, 1] <= height - 1 - margin)))


def sample_pose(model: BodyModel, rng: np.random.Generator, scenario="random",
                cam: CameraIntrinsics | None = None, image_size=None,
                max_tries: int = 50) -> PoseSample:
    """Draw angles uniformly inside the scenario's ranges.

    With a camera and image size the pose is redrawn until every joint
    projects inside the image; after ``max_tries`` the subject is pushed
    back along the optical axis until it fits.
    """
    sc = SCENARIOS[scenario] if isinstance(scenario, str) else scenario
    for _ in range(max_tries):
        angles = {name: tuple(float(rng.uniform(lo, hi)) for lo, hi in sc.angles[name])
                  for name in ARTICULATIONS if name in sc.angles}
        yaw = float(rng.uniform(*sc.yaw))
        root = np.array([rng.uniform(*sc.lateral), 0.0, rng.uniform(*sc.depth)])
        # centres the standing body vertically
        root[1] = -0.02
        joints = forward_kinematics(model, angles, yaw, root)
        if cam is None or _in_frustum(joints, cam, *image_size):
            return PoseSample(angles, yaw, root, joints, sc.name)
    while not _in_frustum(joints, cam, *image_size):
        root = root + np.array([0.0, 0.0, 0.25])
        joints = forward_kinematics(model, angles, yaw, root)
    return PoseSample(angles, yaw, root, joints, sc.name)


def default_camera(width: int = 160, height: int = 120) -> CameraIntrinsics:
    """Kinect-like field of view (about 58 x 45 degrees) at the given resolution."""
    f = width / (2 * np.tan(np.radians(29.0)))
    return CameraIntrinsics(f, f, (width - 1) / 2, (height - 1) / 2)


def _pixel_rays(cam: CameraIntrinsics, width: int, height: int) -> np.ndarray:
    ys, xs = np.mgrid[0:height, 0:width]
    d = np.empty((height * width, 3))
    d[:, 0] = ((xs - cam.principal_x) / cam.focal_x).ravel()
    d[:, 1] = ((ys - cam.principal_y) / cam.focal_y).ravel()
    d[:, 2] = 1.0
    return d


def _sphere_hit(d, dd, c, r) -> np.ndarray:
    """Ray parameter of the first hit of rays ``t*d`` with a sphere, inf if none."""
    dc = d @ c
    disc = dc * dc - dd * (c @ c - r * r)
    t = np.full(len(d), np.inf)
    ok = disc >= 0
    t[ok] = (dc[ok] - np.sqrt(disc[ok])) / dd[ok]
    t[t <= 0] = np.inf
    return t


def _capsule_hit(d, dd, a, b, r) -> np.ndarray:
    t = np.minimum(_sphere_hit(d, dd, a, r), _sphere_hit(d, dd, b, r))
    ba = b - a
    length = np.linalg.norm(ba)
    if length < 1e-12:
        return t
    u = ba / length
    du = d @ u
    d_perp = d - du[:, None] * u
    a_perp = a - (a @ u) * u
    qa = np.einsum("ij,ij->i", d_perp, d_perp)
    qb = d_perp @ a_perp
    qc = a_perp @ a_perp - r * r
    disc = qb * qb - qa * qc
    ok = (disc >= 0) & (qa > 1e-15)
    tc = np.full(len(d), np.inf)
    tc[ok] = (qb[ok] - np.sqrt(disc[ok])) / qa[ok]
    s = tc * du - a @ u
    tc[(s < 0) | (s > length) | (tc <= 0)] = np.inf
    return np.minimum(t, tc)


def _zbuffer(capsules, cam: CameraIntrinsics, width: int, height: int):
    """Nearest ray parameter and capsule index per pixel (inf / -1 on a miss)."""
    if not (cam.focal_x > 0 and cam.focal_y > 0):
        raise ValueError("degenerate camera")
    d = _pixel_rays(cam, width, height)
    dd = np.einsum("ij,ij->i", d, d)
    t = np.full(len(d), np.inf)
    ids = np.full(len(d), -1, np.int64)
    for i, (a, b, r) in enumerate(capsules):
        ti = _capsule_hit(d, dd, np.asarray(a, float), np.asarray(b, float), r)
        closer = ti < t
        t[closer] = ti[closer]
        ids[closer] = i
    return t.reshape(height, width), ids.reshape(height, width)


def _quantize(t, background_depth: int) -> DepthImage:
    # rays have unit z, so the ray parameter is the depth
    mm = np.full(t.shape, background_depth, dtype=np.int64)
    hit = np.isfinite(t)
    mm[hit] = np.clip(np.floor(t[hit] * 1000.0 + 0.5), 1, background_depth - 1)
    return DepthImage(mm.astype(np.uint16), background_depth)


def render_capsules(capsules, cam: CameraIntrinsics, width: int, height: int,
                    background_depth: int = BACKGROUND_DEPTH) -> DepthImage:
    """Z-buffer a list of ``(a, b, radius)`` capsules into a depth image."""
    t, _ = _zbuffer(capsules, cam, width, height)
    return _quantize(t, background_depth)


@dataclass(frozen=True)
class Skeleton:
    positions: np.ndarray  # (J, 3) metres
    visible: np.ndarray  # (J,) bool

    def __len__(self):
        return len(self.positions)


def joint_visibility(model: BodyModel, joints, surface_ids, width: int, height: int,
                     cam: CameraIntrinsics) -> np.ndarray:
    """A joint is visible when the surface seen at its pixel belongs to a
    capsule touching the joint or its parent, i.e. no other body part lies in
    front of it."""
    px = np.floor(project(joints, cam) + 0.5).astype(np.int64)
    vis = np.zeros(len(joints), bool)
    for j, (x, y) in enumerate(px):
        if 0 <= x < width and 0 <= y < height:
            hit = surface_ids[y, x]
            own = {j, model.parents[j]}
            vis[j] = hit >= 0 and not own.isdisjoint(model.bones[hit][:2])
    return vis


def pose_capsules(model: BodyModel, joints) -> list:
    return [(joints[a], joints[b], r) for a, b, r in model.bones]


def render(pose: PoseSample | None, cam: CameraIntrinsics, image_size,
           background_depth: int = BACKGROUND_DEPTH, model: BodyModel | None = None,
           noise_mm: float = 0.0, rng: np.random.Generator | None = None):
    """Render a pose; returns ``(DepthImage, Skeleton)``.

    ``pose=None`` renders an empty scene.  ``noise_mm`` adds Gaussian jitter
    to foreground depths (needs ``rng``).
    """
    model = model or BodyModel()
    width, height = image_size
    if pose is None:
        img = render_capsules([], cam, width, height, background_depth)
        return img, Skeleton(np.zeros((0, 3)), np.zeros(0, bool))
    t, ids = _zbuffer(pose_capsules(model, pose.joints), cam, width, height)
    img = _quantize(t, background_depth)
    vis = joint_visibility(model, pose.joints, ids, width, height, cam)
    if noise_mm > 0:
        fg = img.foreground
        d = img.depths.astype(np.float64)
        d[fg] += rng.normal(0.0, noise_mm, fg.sum())
        d[fg] = np.clip(np.floor(d[fg] + 0.5), 1, background_depth - 1)
        img = DepthImage(d.astype(np.uint16), background_depth)
    return img, Skeleton(pose.joints.copy(), vis)


def parse_scenario_mix(mix) -> dict:
    """``"standing:1,arms-crossed:2"`` or a dict -> normalised weights."""
    if mix is None:
        mix = {name: 1.0 for name in SCENARIOS}
    elif isinstance(mix, str):
        items = {}
        for part in mix.split(","):
            name, _, w = part.strip().partition(":")
            items[name] = float(w) if w else 1.0
        mix = items
    for name, w in mix.items():
        if name not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
        if w < 0:
            raise ValueError("scenario weights must be non-negative")
    total = sum(mix.values())
    if total <= 0:
        raise ValueError("scenario weights sum to zero")
    return {k: v / total for k, v in mix.items()}


def image_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, np.uint32)[0])


def synthesize(index: int, seed: int, mix: dict, cam: CameraIntrinsics, image_size,
               model: BodyModel | None = None, background_depth: int = BACKGROUND_DEPTH,
               noise_mm: float = 0.0):
    """One reproducible labelled image: ``(DepthImage, Skeleton, scenario, image_seed)``."""
    model = model or BodyModel()
    s = image_seed(seed, index)
    rng = np.random.default_rng(s)
    names = sorted(mix)
    scenario = names[rng.choice(len(names), p=[mix[n] for n in names])]
    pose = sample_pose(model, rng, scenario, cam, image_size)
    img, skel = render(pose, cam, image_size, background_depth, model, noise_mm, rng)
    return img, skel, scenario, s


def generate_dataset(model: BodyModel | None, count: int, scenario_mix, cam: CameraIntrinsics,
                     seed: int, output_dir, image_size=(160, 120),
                     background_depth: int = BACKGROUND_DEPTH, noise_mm: float = 0.0) -> Path:
    """Write ``count`` DPH1 images, JSON sidecars and ``manifest.json``.

    Returns the manifest path.
    """
    if count <= 0:
        raise ValueError("count must be positive")
    model = model or BodyModel()
    mix = parse_scenario_mix(scenario_mix)
    out = Path(output_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(count):
        img, skel, scenario, s = synthesize(i, seed, mix, cam, image_size, model,
                                            background_depth, noise_mm)
        stem = f"images/{i:06d}"
        try:
            write_dph(out / f"{stem}.dph", img)
            sidecar = {
                "id": f"{i:06d}", "seed": s, "scenario": scenario,
                "intrinsics": cam.to_dict(), "joint_names": list(model.joint_names),
                "joints": skel.positions.tolist(), "visible": skel.visible.tolist(),
            }
            (out / f"{stem}.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        except OSError as exc:
            raise OSError(f"failed writing {out / stem}: {exc}") from exc
        entries.append({"image": f"{stem}.dph", "sidecar": f"{stem}.json", "seed": s})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=1))
    return manifest
