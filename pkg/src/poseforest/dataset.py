"""Labelled image collections: on-disk manifests and in-memory synthetic sets."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .depthcore import CameraIntrinsics, DepthImage, read_dph
from .synthdata import (BodyModel, default_camera, parse_scenario_mix, synthesize)


@dataclass(frozen=True)
class LabelledImage:
    id: str
    image: DepthImage
    cam: CameraIntrinsics
    joints: np.ndarray  # (J, 3) metres
    visible: np.ndarray  # (J,) bool
    scenario: str = ""


class Dataset(list):
    """A list of :class:`LabelledImage` with a couple of conveniences."""

    def __getitem__(self, key):
        out = super().__getitem__(key)
        return Dataset(out) if isinstance(key, slice) else out

    @property
    def joint_count(self) -> int:
        return len(self[0].joints) if self else 0

    def stack(self) -> np.ndarray:
        """All depth grids as one ``(n, h, w)`` array; images must share a size."""
        shapes = {item.image.depths.shape for item in self}
        if len(shapes) != 1:
            raise ValueError(f"images differ in size: {sorted(shapes)}")
        return np.stack([item.image.depths for item in self])


def load_manifest(path) -> Dataset:
    path = Path(path)
    try:
        entries = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc}") from exc
    root = path.parent
    data = Dataset()
    for entry in entries:
        side_path = root / entry["sidecar"]
        try:
            side = json.loads(side_path.read_text())
            image = read_dph(root / entry["image"])
        except OSError as exc:
            raise OSError(f"cannot read dataset entry {entry['image']}: {exc}") from exc
        data.append(LabelledImage(
            id=str(side.get("id", Path(entry["image"]).stem)), image=image,
            cam=CameraIntrinsics.from_dict(side["intrinsics"]),
            joints=np.array(side["joints"], dtype=np.float64).reshape(-1, 3),
            visible=np.array(side["visible"], dtype=bool), scenario=side.get("scenario", "")))
    return data


def synthetic(count: int, seed: int, scenario_mix=None, image_size=(160, 120),
              cam: CameraIntrinsics | None = None, model: BodyModel | None = None,
              noise_mm: float = 0.0, start: int = 0) -> Dataset:
    """The images ``generate_dataset`` would write for indices ``start..start+count``,
    kept in memory."""
    cam = cam or default_camera(*image_size)
    mix = parse_scenario_mix(scenario_mix)
    data = Dataset()
    for i in range(start, start + count):
        img, skel, scenario, _ = synthesize(i, seed, mix, cam, image_size, model,
                                            noise_mm=noise_mm)
        data.append(LabelledImage(f"{i:06d}", img, cam, skel.positions, skel.visible, scenario))
    return data
