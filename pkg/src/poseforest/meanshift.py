"""Weighted Gaussian mean shift over 3-D points.

The density being climbed is ``sum_i w_i * exp(-||(x - p_i) / b||^2)`` with no
factor of one half in the exponent.  Every positively weighted point seeds one
ascent; converged endpoints closer than ``merge_radius`` are merged and each
mode's score is the weight of the seeds that ended on it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass(frozen=True)
class MeanShiftConfig:
    tolerance: float = 1e-5
    max_iter: int = 100
    merge_radius: float | None = None  # defaults to bandwidth / 2

    def radius_for(self, bandwidth: float) -> float:
        return bandwidth / 2 if self.merge_radius is None else self.merge_radius


@dataclass(frozen=True)
class Mode:
    position: np.ndarray
    score: float


def _as_points(points, weights):
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    w = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
    if p.shape[0] != w.shape[0]:
        raise ValueError("points and weights differ in length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.all(np.isfinite(p)):
        raise ValueError("points must be finite")
    return p, w


def density(query, points, weights, bandwidth: float) -> float:
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    p, w = _as_points(points, weights)
    if p.shape[0] == 0:
        return 0.0
    d2 = np.sum((p - np.asarray(query, dtype=np.float64)) ** 2, axis=1)
    return float(np.sum(w * np.exp(-d2 / bandwidth ** 2)))


def shift_vector(x, points, weights, bandwidth: float) -> np.ndarray:
    """Displacement from ``x`` to the kernel-weighted mean."""
    p, w = _as_points(points, weights)
    k = w * np.exp(-np.sum((p - x) ** 2, axis=1) / bandwidth ** 2)
    return k @ p / k.sum() - x


def ascent_path(start, points, weights, bandwidth: float,
                config: MeanShiftConfig = MeanShiftConfig()):
    """Plain numpy trajectory of one ascent, for inspection and testing.

    Returns ``(iterates, densities, converged)``.
    """
    x = np.asarray(start, dtype=np.float64)
    path, dens = [x], [density(x, points, weights, bandwidth)]
    for _ in range(config.max_iter):
        step = shift_vector(x, points, weights, bandwidth)
        if np.linalg.norm(step) <= config.tolerance:
            return np.array(path), np.array(dens), True
        x = x + step
        path.append(x)
        dens.append(density(x, points, weights, bandwidth))
    return np.array(path), np.array(dens), False


@njit(cache=True, nogil=True)
def _mode_kernel(points, weights, bandwidth, tol, max_iter, merge_radius):
    n = points.shape[0]
    inv_b2 = 1.0 / (bandwidth * bandwidth)
    ends = np.empty((n, 3))
    dens = np.zeros(n)
    status = np.zeros(n, np.int8)  # 0 unseeded, 1 converged, 2 capped
    for s in range(n):
        if weights[s] <= 0.0:
            continue
        x0 = points[s, 0]
        x1 = points[s, 1]
        x2 = points[s, 2]
        status[s] = 2
        for _ in range(max_iter + 1):
            sw = 0.0
            m0 = 0.0
            m1 = 0.0
            m2 = 0.0
            for i in range(n):
                wi = weights[i]
                if wi <= 0.0:
                    continue
                d0 = x0 - points[i, 0]
                d1 = x1 - points[i, 1]
                d2 = x2 - points[i, 2]
                k = wi * np.exp(-(d0 * d0 + d1 * d1 + d2 * d2) * inv_b2)
                sw += k
                m0 += k * points[i, 0]
                m1 += k * points[i, 1]
                m2 += k * points[i, 2]
            if sw <= 0.0:
                break
            m0 = m0 / sw - x0
            m1 = m1 / sw - x1
            m2 = m2 / sw - x2
            dens[s] = sw
            if np.sqrt(m0 * m0 + m1 * m1 + m2 * m2) <= tol:
                status[s] = 1
                break
            x0 += m0
            x1 += m1
            x2 += m2
        ends[s, 0] = x0
        ends[s, 1] = x1
        ends[s, 2] = x2

    # merge converged endpoints, densest first; capped ascents may only join
    order = np.argsort(-dens, kind="mergesort")
    modes = np.empty((n, 3))
    scores = np.zeros(n)
    m = 0
    r2 = merge_radius * merge_radius
    for pass_status in (1, 2):
        for oi in range(n):
            s = order[oi]
            if status[s] != pass_status:
                continue
            best = -1
            best_d = r2
            for j in range(m):
                d0 = ends[s, 0] - modes[j, 0]
                d1 = ends[s, 1] - modes[j, 1]
                d2 = ends[s, 2] - modes[j, 2]
                dd = d0 * d0 + d1 * d1 + d2 * d2
                if dd <= best_d:
                    best_d = dd
                    best = j
            if best >= 0:
                scores[best] += weights[s]
            elif pass_status == 1:
                modes[m] = ends[s]
                scores[m] = weights[s]
                m += 1
    return modes[:m].copy(), scores[:m].copy()


def rank_modes(positions: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Order by descending score, ties by lexicographic position."""
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], -scores))


def mode_arrays(points, weights, bandwidth: float,
                config: MeanShiftConfig = MeanShiftConfig()):
    """Array form of :func:`find_modes`: ``(positions (m, 3), scores (m,))``, ranked."""
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    p, w = _as_points(points, weights)
    pos, sc = _mode_kernel(p, w, float(bandwidth), float(config.tolerance),
                           int(config.max_iter), float(config.radius_for(bandwidth)))
    order = rank_modes(pos, sc)
    return pos[order], sc[order]


def find_modes(points, weights, bandwidth: float,
               config: MeanShiftConfig = MeanShiftConfig()) -> list[Mode]:
    pos, sc = mode_arrays(points, weights, bandwidth, config)
    return [Mode(pos[i].copy(), float(sc[i])) for i in range(len(sc))]


def top_k_modes(points, weights, bandwidth: float, k: int,
                config: MeanShiftConfig = MeanShiftConfig()) -> list[Mode]:
    if k <= 0:
        return []
    return find_modes(points, weights, bandwidth, config)[:k]
