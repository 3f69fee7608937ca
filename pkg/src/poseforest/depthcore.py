"""Depth images, the pinhole camera and the depth-comparison feature.

Depths are stored as millimetres in ``uint16`` and only converted to metres
when a pixel is lifted into camera space.  Pixel coordinates are ``(x, y)``,
i.e. ``(column, row)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BACKGROUND_DEPTH = 10000  # mm

DPH_MAGIC = b"DPH1"
DPH_VERSION = 1
_DPH_HEADER = struct.Struct("<4sIIII")


class DepthFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DepthImage:
    depths: np.ndarray
    background_depth: int = BACKGROUND_DEPTH

    def __post_init__(self):
        d = np.ascontiguousarray(self.depths, dtype=np.uint16)
        if d.ndim != 2 or d.shape[0] == 0 or d.shape[1] == 0:
            raise ValueError(f"depth grid must be 2-D and non-empty, got {d.shape}")
        if not 0 < self.background_depth <= 0xFFFF:
            raise ValueError("background_depth must fit in uint16 and be > 0")
        if np.any(d > self.background_depth) or np.any(d == 0):
            raise ValueError("depths must lie in (0, background_depth]")
        if d is self.depths:
            d = d.copy()
        d.setflags(write=False)
        object.__setattr__(self, "depths", d)

    @property
    def width(self) -> int:
        return self.depths.shape[1]

    @property
    def height(self) -> int:
        return self.depths.shape[0]

    @property
    def foreground(self) -> np.ndarray:
        return self.depths < self.background_depth

    def depth_at(self, q) -> int:
        x, y = q
        if not (0 <= x < self.width and 0 <= y < self.height):
            raise IndexError(f"pixel {q} outside {self.width}x{self.height} image")
        return int(self.depths[y, x])

    def is_foreground(self, q) -> bool:
        return self.depth_at(q) < self.background_depth

    def foreground_pixels(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major ``(xs, ys)`` of every foreground pixel."""
        ys, xs = np.nonzero(self.foreground)
        return xs, ys

    @classmethod
    def blank(cls, width: int, height: int, background_depth: int = BACKGROUND_DEPTH):
        return cls(np.full((height, width), background_depth, np.uint16), background_depth)


@dataclass(frozen=True)
class CameraIntrinsics:
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float

    def __post_init__(self):
        if not (self.focal_x > 0 and self.focal_y > 0):
            raise ValueError("focal lengths must be positive")

    def to_dict(self) -> dict:
        return {"focal_x": self.focal_x, "focal_y": self.focal_y,
                "principal_x": self.principal_x, "principal_y": self.principal_y}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(float(d["focal_x"]), float(d["focal_y"]),
                   float(d["principal_x"]), float(d["principal_y"]))


@dataclass(frozen=True)
class WorldPoint:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.y, self.z])):
            raise ValueError("world point must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


@dataclass(frozen=True)
class SplitTest:
    """Two depth probes, offsets in pixel-metres, and a threshold in mm."""

    offset_u: tuple[float, float]
    offset_v: tuple[float, float]
    tau: float

    def as_array(self) -> np.ndarray:
        return np.array([*self.offset_u, *self.offset_v], dtype=np.float64)


def back_project(q, image: DepthImage, cam: CameraIntrinsics) -> WorldPoint:
    if not image.is_foreground(q):
        raise ValueError(f"pixel {q} is background")
    z = image.depth_at(q) / 1000.0
    x, y = q
    return WorldPoint((x - cam.principal_x) * z / cam.focal_x,
                      (y - cam.principal_y) * z / cam.focal_y, z)


def back_project_many(xs, ys, depth_mm, cam: CameraIntrinsics) -> np.ndarray:
    """Vectorised ``back_project``; returns an ``(n, 3)`` array in metres."""
    z = np.asarray(depth_mm, dtype=np.float64) / 1000.0
    out = np.empty((z.shape[0], 3))
    out[:, 0] = (np.asarray(xs) - cam.principal_x) * z / cam.focal_x
    out[:, 1] = (np.asarray(ys) - cam.principal_y) * z / cam.focal_y
    out[:, 2] = z
    return out


def project(points, cam: CameraIntrinsics) -> np.ndarray:
    """Camera-space points ``(n, 3)`` to continuous pixel coordinates ``(n, 2)``."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    return np.stack([p[:, 0] * cam.focal_x / p[:, 2] + cam.principal_x,
                     p[:, 1] * cam.focal_y / p[:, 2] + cam.principal_y], axis=1)


def probe_index(coord, offset, depth_m):
    """Pixel index reached by a depth-normalised offset (round half up)."""
    return np.floor(coord + offset / depth_m + 0.5).astype(np.int64)


def stack_responses(stack: np.ndarray, background_depth: int, img, xs, ys, tests) -> np.ndarray:
    """Feature responses over a ``(n_images, h, w)`` depth stack.

    Pixel ``k`` is ``(xs[k], ys[k])`` of image ``img[k]`` and is tested against
    ``tests[k] = (ux, uy, vx, vy)`` (a single row broadcasts).  Probes that
    leave the image read ``background_depth``.
    """
    img = np.asarray(img, dtype=np.int64)
    xs = np.asarray(xs, dtype=np.int64)
    ys = np.asarray(ys, dtype=np.int64)
    t = np.asarray(tests, dtype=np.float64)
    _, h, w = stack.shape
    d_m = stack[img, ys, xs].astype(np.float64) / 1000.0

    def probe(ox, oy):
        px = probe_index(xs, ox, d_m)
        py = probe_index(ys, oy, d_m)
        inside = (px >= 0) & (px < w) & (py >= 0) & (py < h)
        out = np.full(px.shape, background_depth, dtype=np.int64)
        out[inside] = stack[np.broadcast_to(img, px.shape)[inside], py[inside], px[inside]]
        return out

    return probe(t[..., 0], t[..., 1]) - probe(t[..., 2], t[..., 3])


def feature_responses(image: DepthImage, xs, ys, tests) -> np.ndarray:
    """Responses for many pixels of one image; see :func:`stack_responses`."""
    xs = np.asarray(xs, dtype=np.int64)
    return stack_responses(image.depths[None], image.background_depth,
                           np.zeros(xs.shape, np.int64), xs, ys, tests)


def feature_response(image: DepthImage, q, test: SplitTest) -> int:
    if not image.is_foreground(q):
        raise ValueError(f"pixel {q} is background")
    r = feature_responses(image, [q[0]], [q[1]], test.as_array())
    return int(r[0])


def evaluate_split(image: DepthImage, q, test: SplitTest) -> str:
    """``"left"`` iff the response is strictly below ``tau``."""
    return "left" if feature_response(image, q, test) < test.tau else "right"


def write_dph(path, image: DepthImage) -> None:
    header = _DPH_HEADER.pack(DPH_MAGIC, DPH_VERSION, image.width, image.height,
                              image.background_depth)
    Path(path).write_bytes(header + image.depths.astype("<u2").tobytes())


def read_dph(path) -> DepthImage:
    data = Path(path).read_bytes()
    if len(data) < _DPH_HEADER.size:
        raise DepthFormatError(f"{path}: truncated header")
    magic, version, w, h, bg = _DPH_HEADER.unpack_from(data)
    if magic != DPH_MAGIC:
        raise DepthFormatError(f"{path}: bad magic {magic!r}")
    if version != DPH_VERSION:
        raise DepthFormatError(f"{path}: unsupported version {version}")
    body = data[_DPH_HEADER.size:]
    if len(body) != 2 * w * h:
        raise DepthFormatError(f"{path}: expected {2 * w * h} depth bytes, got {len(body)}")
    depths = np.frombuffer(body, dtype="<u2").reshape(h, w)
    return DepthImage(depths, bg)
