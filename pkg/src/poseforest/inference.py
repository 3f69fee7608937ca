"""Joint hypotheses from a single depth image.

Every foreground pixel is pushed down every tree; each relative vote at the
reached leaf that is no longer than the joint's ``lambda`` becomes an absolute
vote ``x_q + delta`` weighted by ``w * z_q**2`` (``z_q`` in metres).  The votes
of each joint are pooled over trees, subsampled to ``n_votes``, and aggregated
with mean shift at the joint's bandwidth.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .depthcore import CameraIntrinsics, DepthImage, back_project_many
from .forest import Forest
from .meanshift import MeanShiftConfig, density, mode_arrays
from .training import default_threads


class JointCountMismatch(ValueError):
    pass


@dataclass(frozen=True)
class Hypothesis:
    joint: int
    position: np.ndarray
    confidence: float


@dataclass
class InferenceConfig:
    n_votes: int = 200
    lambdas: tuple | None = None  # per-joint override of the forest's values
    bandwidths: tuple | None = None
    max_hypotheses: int = 5
    seed: int = 0
    meanshift: MeanShiftConfig = MeanShiftConfig()

    def __post_init__(self):
        if self.n_votes <= 0:
            raise ValueError("n_votes must be positive")


@dataclass
class VoteSet:
    """Absolute votes ``Z_j`` of one joint."""

    positions: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)

    def __len__(self):
        return len(self.weights)


def _per_joint(values, default, J):
    if values is None:
        return np.asarray(default, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    return np.repeat(v, J) if len(v) == 1 else v


def collect_votes(image: DepthImage, cam: CameraIntrinsics, forest: Forest,
                  lambdas=None, joint_count: int | None = None) -> list[VoteSet]:
    """Votes for every joint, ordered by pixel (row-major), then tree, then k."""
    J = forest.joint_count
    if joint_count is not None and joint_count != J:
        raise JointCountMismatch(f"image labelled with {joint_count} joints, forest has {J}")
    lam = _per_joint(lambdas, forest.lambdas, J)
    xs, ys = image.foreground_pixels()
    world = back_project_many(xs, ys, image.depths[ys, xs], cam)
    weight_scale = world[:, 2] ** 2
    if len(xs) == 0 or not forest.trees:
        return [VoteSet(np.zeros((0, 3)), np.zeros(0)) for _ in range(J)]
    # (pixels, trees) leaf table
    leaves = np.stack([t.apply(image, xs, ys) for t in forest.trees], axis=1)
    out = []
    for j in range(J):
        pos, wts = [], []
        for ti, tree in enumerate(forest.trees):
            lf = leaves[:, ti]
            delta = tree.votes[lf, j]  # (P, K, 3)
            w = tree.weights[lf, j]
            valid = np.arange(forest.k)[None, :] < tree.counts[lf, j][:, None]
            valid &= np.linalg.norm(delta, axis=2) <= lam[j]
            pos.append(np.where(valid[..., None], delta + world[:, None, :], np.nan))
            wts.append(np.where(valid, w * weight_scale[:, None], np.nan))
        # (P, T, K) ordering: pixel-major
        p = np.stack(pos, axis=1).reshape(-1, 3)
        w = np.stack(wts, axis=1).reshape(-1)
        keep = ~np.isnan(w)
        out.append(VoteSet(p[keep], w[keep]))
    return out


def subsample(votes: VoteSet, n: int, rng: np.random.Generator) -> VoteSet:
    """Uniform sample of ``min(n, len(votes))`` votes without replacement,
    drawn with a reservoir and returned in original order."""
    if n <= 0:
        raise ValueError("n must be positive")
    m = len(votes)
    if m <= n:
        return votes
    kept = np.arange(n)
    draws = rng.integers(0, np.arange(n + 1, m + 1))
    for i, j in zip(range(n, m), draws):
        if j < n:
            kept[j] = i
    kept.sort()
    return VoteSet(votes.positions[kept], votes.weights[kept])


def aggregate(votes: VoteSet, bandwidth: float, joint: int, max_hypotheses: int,
              config: MeanShiftConfig = MeanShiftConfig()) -> list[Hypothesis]:
    if len(votes) == 0:
        return []
    pos, score = mode_arrays(votes.positions, votes.weights, bandwidth, config)
    return [Hypothesis(joint, pos[i].copy(), float(score[i]))
            for i in range(min(max_hypotheses, len(score)))]


def infer(image: DepthImage, cam: CameraIntrinsics, forest: Forest,
          config: InferenceConfig = InferenceConfig(), rng: np.random.Generator | None = None,
          joint_count: int | None = None) -> list[list[Hypothesis]]:
    """Ranked hypotheses for every joint (most confident first)."""
    J = forest.joint_count
    bw = _per_joint(config.bandwidths, forest.bandwidths, J)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    zs = collect_votes(image, cam, forest, config.lambdas, joint_count)
    return [aggregate(subsample(zs[j], config.n_votes, rng), bw[j], j, config.max_hypotheses,
                      config.meanshift) for j in range(J)]


def hypothesis_density(h: Hypothesis, votes: VoteSet, bandwidth: float) -> float:
    """Vote density at a hypothesis (diagnostic; ranking uses the mode score)."""
    return density(h.position, votes.positions, votes.weights, bandwidth)


def image_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


@dataclass
class BatchResult:
    id: str
    hypotheses: list[list[Hypothesis]]
    wall_ms: float

    def to_record(self) -> dict:
        return {"id": self.id, "wall_ms": round(self.wall_ms, 3),
                "joints": [[{"position": h.position.tolist(), "confidence": h.confidence}
                            for h in hs] for hs in self.hypotheses]}


def infer_batch(dataset, forest: Forest, config: InferenceConfig = InferenceConfig(),
                threads: int | None = None) -> list[BatchResult]:
    """Run :func:`infer` over a dataset; image ``i`` subsamples with seed ``config.seed ^ i``."""

    def run(i):
        item = dataset[i]
        start = time.perf_counter()
        try:
            hyps = infer(item.image, item.cam, forest, config, image_rng(config.seed, i),
                         joint_count=len(item.joints))
        except JointCountMismatch:
            raise
        except Exception as exc:
            raise RuntimeError(f"inference failed on image {item.id}: {exc}") from exc
        return BatchResult(item.id, hyps, (time.perf_counter() - start) * 1000.0)

    threads = max(1, threads or default_threads())
    if threads == 1 or len(dataset) <= 1:
        return [run(i) for i in range(len(dataset))]
    with ThreadPoolExecutor(threads) as pool:
        return list(pool.map(run, range(len(dataset))))


def write_predictions(path, results: list[BatchResult], include_timing: bool = False) -> None:
    with open(path, "w") as f:
        for r in results:
            rec = r.to_record()
            if not include_timing:
                rec.pop("wall_ms")
            f.write(json.dumps(rec) + "\n")


def read_predictions(path) -> list[dict]:
    """JSON-lines records ``{id, joints: [[{position, confidence}, ...], ...]}``."""
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
