"""Forest training: greedy tree growth and leaf vote learning.

Tree structure is grown by minimising the size-weighted child error over a
random grid of (probe pair, threshold) candidates at every node.  Two node
errors are available: the classification error is ``|Q|`` times the Shannon
entropy of surrogate part labels (the nearest ground-truth joint of each
pixel), and the regression error is the within-node sum of squared deviations
of the pixel-to-joint offsets, counting only offsets no longer than ``rho``.

Once a tree is grown, every training pixel is routed to its leaf and its
offsets to all joints are pushed into per-(leaf, joint) reservoirs.  Each
reservoir is clustered with mean shift and the ``k`` heaviest modes become the
leaf's relative votes.
"""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from numba import njit

from .depthcore import SplitTest, back_project_many, stack_responses
from .forest import Forest, Tree
from .meanshift import MeanShiftConfig, mode_arrays

logger = logging.getLogger(__name__)

# vote length thresholds: short for extremities, long for the torso
DEFAULT_LAMBDAS = (0.25, 0.35, 0.4, 0.4, 0.3, 0.15, 0.1, 0.3, 0.15, 0.1,
                   0.35, 0.15, 0.1, 0.35, 0.15, 0.1)
DEFAULT_BANDWIDTH = 0.05


@dataclass
class TrainingConfig:
    tree_count: int = 3
    max_depth: int = 20
    candidate_tests: int = 500
    candidate_thresholds: int = 20
    min_samples_leaf: int = 5
    pixels_per_image: int = 300
    objective: str = "classification"  # or "regression"
    rho: float = 0.3  # m, offsets counted by the regression error
    reservoir_capacity: int = 400
    cluster_bandwidth: float = 0.005  # m
    k: int = 2
    probe_radius: float = 0.6  # m at the probed pixel's depth
    seed: int = 0
    lambdas: tuple = DEFAULT_LAMBDAS
    bandwidths: tuple = ()  # per-joint aggregation bandwidth, empty -> DEFAULT_BANDWIDTH
    meanshift: MeanShiftConfig = field(default_factory=MeanShiftConfig)

    def validate(self) -> None:
        counts = ("tree_count", "candidate_tests", "candidate_thresholds", "min_samples_leaf",
                  "pixels_per_image", "reservoir_capacity")
        for name in counts:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_depth < 0 or self.k < 0:
            raise ValueError("max_depth and k must be non-negative")
        if self.objective not in ("classification", "regression"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not (self.rho > 0 and self.cluster_bandwidth > 0 and self.probe_radius > 0):
            raise ValueError("rho, cluster_bandwidth and probe_radius must be positive")
        if any(v <= 0 for v in self.lambdas) or any(v <= 0 for v in self.bandwidths):
            raise ValueError("lambdas and bandwidths must be positive")

    def joint_params(self, joint_count: int) -> tuple[np.ndarray, np.ndarray]:
        lam = np.asarray(self.lambdas, dtype=np.float64)
        bw = np.asarray(self.bandwidths or (DEFAULT_BANDWIDTH,), dtype=np.float64)
        if len(lam) == 1:
            lam = np.repeat(lam, joint_count)
        if len(bw) == 1:
            bw = np.repeat(bw, joint_count)
        if len(lam) != joint_count or len(bw) != joint_count:
            raise ValueError(f"need 1 or {joint_count} lambdas/bandwidths")
        return lam, bw

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambdas"] = list(self.lambdas)
        d["bandwidths"] = list(self.bandwidths)
        return d


def load_config(path) -> TrainingConfig:
    """Read ``key = value`` lines (``#`` comments) into a :class:`TrainingConfig`.

    Keys are the field names; ``lambdas``/``bandwidths`` take comma-separated
    lists; ``meanshift_tolerance``, ``meanshift_max_iter`` and
    ``meanshift_merge_radius`` set the clustering engine.
    """
    cfg = TrainingConfig()
    types = {f.name: f.type for f in fields(TrainingConfig)}
    ms = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (s.strip() for s in line.partition("="))
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        if key.startswith("meanshift_"):
            name = key[len("meanshift_"):]
            ms[name] = int(value) if name == "max_iter" else float(value)
        elif key in ("lambdas", "bandwidths"):
            setattr(cfg, key, tuple(float(v) for v in value.split(",") if v.strip()))
        elif key in types and key != "meanshift":
            kind = types[key]
            conv = int if kind == "int" else float if kind == "float" else str
            try:
                setattr(cfg, key, conv(value))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    if ms:
        cfg.meanshift = MeanShiftConfig(**ms)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# training pixels

@dataclass
class TrainingSet:
    """Column store of training pixels.

    ``offsets[s, j]`` is the ground-truth joint ``j`` minus the pixel's world
    position; ``labels[s]`` the index of the nearest joint.
    """

    stack: np.ndarray  # (n_images, h, w) uint16
    background_depth: int
    img: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    world: np.ndarray  # (n, 3)
    joints: np.ndarray  # (n, J, 3) ground truth per sample
    offsets: np.ndarray  # (n, J, 3)
    labels: np.ndarray  # (n,)
    focal: float = 1.0

    def __len__(self):
        return len(self.img)

    @property
    def joint_count(self) -> int:
        return self.offsets.shape[1]

    def responses(self, idx, tests) -> np.ndarray:
        return stack_responses(self.stack, self.background_depth, self.img[idx],
                               self.xs[idx], self.ys[idx], tests)


def sample_pixels(dataset, pixels_per_image: int, rng: np.random.Generator) -> TrainingSet:
    """Draw up to ``pixels_per_image`` foreground pixels per image without replacement."""
    stack = dataset.stack()
    bg = dataset[0].image.background_depth
    cols = {k: [] for k in ("img", "xs", "ys", "world", "joints")}
    for i, item in enumerate(dataset):
        xs, ys = item.image.foreground_pixels()
        if len(xs) > pixels_per_image:
            pick = np.sort(rng.choice(len(xs), pixels_per_image, replace=False))
            xs, ys = xs[pick], ys[pick]
        cols["img"].append(np.full(len(xs), i, np.int32))
        cols["xs"].append(xs.astype(np.int32))
        cols["ys"].append(ys.astype(np.int32))
        cols["world"].append(back_project_many(xs, ys, item.image.depths[ys, xs], item.cam))
        cols["joints"].append(np.broadcast_to(item.joints, (len(xs), *item.joints.shape)))
    world = np.concatenate(cols["world"])
    joints = np.concatenate(cols["joints"])
    offsets = joints - world[:, None, :]
    labels = np.argmin(np.sum(offsets ** 2, axis=2), axis=1).astype(np.int32)
    return TrainingSet(stack, bg, np.concatenate(cols["img"]), np.concatenate(cols["xs"]),
                       np.concatenate(cols["ys"]), world, joints, offsets, labels,
                       float(dataset[0].cam.focal_x))


# ---------------------------------------------------------------------------
# node errors

def entropy_mass(counts) -> float:
    """``n * H`` (natural log) for a label histogram."""
    c = np.asarray(counts, dtype=np.float64)
    c = c[c > 0]
    n = c.sum()
    return float(n * np.log(n) - np.sum(c * np.log(c))) if n > 0 else 0.0


def classification_error(labels) -> float:
    """``|Q|`` times the entropy of the part-label distribution of ``Q``."""
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return entropy_mass(np.unique(labels, return_counts=True)[1])


def regression_error(offsets, rho: float) -> float:
    """Sum over joints of squared deviations of offsets no longer than ``rho``.

    ``offsets`` is ``(n, J, 3)``.
    """
    if rho <= 0:
        raise ValueError("rho must be positive")
    off = np.asarray(offsets, dtype=np.float64)
    total = 0.0
    for j in range(off.shape[1]):
        d = off[:, j]
        d = d[np.linalg.norm(d, axis=1) <= rho]
        if len(d):
            total += float(np.sum((d - d.mean(axis=0)) ** 2))
    return total


def node_error(ts: TrainingSet, idx, objective: str, rho: float) -> float:
    if objective == "classification":
        return classification_error(ts.labels[idx])
    return regression_error(ts.offsets[idx], rho)


def split_objective(ts: TrainingSet, idx, test: SplitTest, error) -> float:
    """Size-weighted child error of splitting ``idx`` with ``test``.

    ``error`` maps an index array to the node error; an empty side adds 0.
    """
    idx = np.asarray(idx)
    if idx.size == 0:
        raise ValueError("cannot split an empty sample set")
    go_left = ts.responses(idx, test.as_array()) < test.tau
    total = 0.0
    for side in (idx[go_left], idx[~go_left]):
        if side.size:
            total += side.size / idx.size * error(side)
    return total


# ---------------------------------------------------------------------------
# compiled inner loops

@njit(cache=True, nogil=True)
def _probe(stack, bg, i, x, y, ox, oy, d):
    px = np.int64(np.floor(x + ox / d + 0.5))
    py = np.int64(np.floor(y + oy / d + 0.5))
    if px < 0 or py < 0 or px >= stack.shape[2] or py >= stack.shape[1]:
        return np.int64(bg)
    return np.int64(stack[i, py, px])


@njit(cache=True, nogil=True)
def _responses(stack, bg, img, xs, ys, tests):
    n = img.shape[0]
    out = np.empty((tests.shape[0], n), np.int64)
    for s in range(n):
        i = img[s]
        x = np.float64(xs[s])
        y = np.float64(ys[s])
        d = stack[i, ys[s], xs[s]] / 1000.0
        for t in range(tests.shape[0]):
            out[t, s] = (_probe(stack, bg, i, x, y, tests[t, 0], tests[t, 1], d)
                         - _probe(stack, bg, i, x, y, tests[t, 2], tests[t, 3], d))
    return out


@njit(cache=True, nogil=True)
def _bin_of(r, thr):
    # number of thresholds <= r; the sample goes left for every threshold after that
    lo = 0
    hi = thr.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if thr[mid] <= r:
            lo = mid + 1
        else:
            hi = mid
    return lo


@njit(cache=True, nogil=True)
def _xlogx(c):
    return c * np.log(c) if c > 0 else 0.0


@njit(cache=True, nogil=True)
def _cls_objectives(resp, thr, labels, n_classes, min_leaf):
    n_tests, n = resp.shape
    n_thr = thr.shape[1]
    out = np.empty((n_tests, n_thr))
    total = np.zeros(n_classes)
    for s in range(n):
        total[labels[s]] += 1.0
    for t in range(n_tests):
        hist = np.zeros((n_thr + 1, n_classes))
        for s in range(n):
            hist[_bin_of(resp[t, s], thr[t]), labels[s]] += 1.0
        left = np.zeros(n_classes)
        for k in range(n_thr):
            left += hist[k]
            nl = left.sum()
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                out[t, k] = np.inf
                continue
            el = _xlogx(nl)
            er = _xlogx(nr)
            for c in range(n_classes):
                el -= _xlogx(left[c])
                er -= _xlogx(total[c] - left[c])
            out[t, k] = nl / n * el + nr / n * er
    return out


@njit(cache=True, nogil=True)
def _sse(st):
    # st: (J, 5) = count, sum x, sum y, sum z, sum of squared norms
    e = 0.0
    for j in range(st.shape[0]):
        c = st[j, 0]
        if c > 0:
            e += st[j, 4] - (st[j, 1] ** 2 + st[j, 2] ** 2 + st[j, 3] ** 2) / c
    return e


@njit(cache=True, nogil=True)
def _reg_objectives(resp, thr, stats, active, n_active, min_leaf):
    # active[s, :n_active[s]] lists the joints whose offset from sample s is counted
    n_tests, n = resp.shape
    n_thr = thr.shape[1]
    n_j = stats.shape[1]
    out = np.empty((n_tests, n_thr))
    total = np.zeros((n_j, 5))
    for s in range(n):
        for a in range(n_active[s]):
            j = active[s, a]
            for c in range(5):
                total[j, c] += stats[s, j, c]
    hist = np.zeros((n_thr + 1, n_j, 5))
    counts = np.zeros(n_thr + 1)
    left = np.zeros((n_j, 5))
    right = np.zeros((n_j, 5))
    for t in range(n_tests):
        hist[:] = 0.0
        counts[:] = 0.0
        for s in range(n):
            b = _bin_of(resp[t, s], thr[t])
            counts[b] += 1.0
            for a in range(n_active[s]):
                j = active[s, a]
                for c in range(5):
                    hist[b, j, c] += stats[s, j, c]
        left[:] = 0.0
        nl = 0.0
        for k in range(n_thr):
            for j in range(n_j):
                for c in range(5):
                    left[j, c] += hist[k, j, c]
                    right[j, c] = total[j, c] - left[j, c]
            nl += counts[k]
            nr = n - nl
            if nl < min_leaf or nr < min_leaf:
                out[t, k] = np.inf
                continue
            out[t, k] = nl / n * _sse(left) + nr / n * _sse(right)
    return out


def active_joints(stats) -> tuple[np.ndarray, np.ndarray]:
    """Per sample, the joints with a counted offset (padded index table and lengths)."""
    keep = stats[..., 0] > 0
    n_active = keep.sum(axis=1).astype(np.int64)
    # stable sort puts counted joints first, in joint order
    active = np.argsort(~keep, axis=1, kind="stable").astype(np.int64)
    return active, n_active


def regression_stats(offsets, rho: float) -> np.ndarray:
    """Per-sample sufficient statistics ``(n, J, 5)`` for the regression error."""
    keep = (np.linalg.norm(offsets, axis=2) <= rho).astype(np.float64)
    st = np.empty(offsets.shape[:2] + (5,))
    st[..., 0] = keep
    st[..., 1:4] = offsets * keep[..., None]
    st[..., 4] = np.sum(offsets ** 2, axis=2) * keep
    return st


# ---------------------------------------------------------------------------
# tree growth

def sample_candidate_tests(rng: np.random.Generator, count: int, radius: float) -> np.ndarray:
    """``count`` probe pairs, each probe uniform in a disc of ``radius`` pixel-metres."""
    r = radius * np.sqrt(rng.random((count, 2)))
    theta = rng.random((count, 2)) * 2 * np.pi
    return np.stack([r[:, 0] * np.cos(theta[:, 0]), r[:, 0] * np.sin(theta[:, 0]),
                     r[:, 1] * np.cos(theta[:, 1]), r[:, 1] * np.sin(theta[:, 1])], axis=1)


@dataclass
class NodeRecord:
    """What the split search saw at one node (for auditing)."""

    depth: int
    idx: np.ndarray
    tests: np.ndarray
    thresholds: np.ndarray
    objectives: np.ndarray
    chosen: tuple | None
    error: float


_CHUNK = 64


def _score_candidates(ts, idx, tests, fractions, config, stats):
    img, xs, ys = ts.img[idx], ts.xs[idx], ts.ys[idx]
    if stats is not None:
        stats = tuple(a[idx] for a in stats)
    thresholds = np.empty(fractions.shape)
    objectives = np.empty(fractions.shape)
    for a in range(0, len(tests), _CHUNK):
        b = min(a + _CHUNK, len(tests))
        resp = _responses(ts.stack, ts.background_depth, img, xs, ys, tests[a:b])
        lo = resp.min(axis=1).astype(np.float64)
        hi = resp.max(axis=1).astype(np.float64)
        thr = np.sort(lo[:, None] + fractions[a:b] * (hi - lo)[:, None], axis=1)
        thresholds[a:b] = thr
        if config.objective == "classification":
            objectives[a:b] = _cls_objectives(resp, thr, ts.labels[idx], ts.joint_count,
                                              config.min_samples_leaf)
        else:
            objectives[a:b] = _reg_objectives(resp, thr, *stats, config.min_samples_leaf)
    return thresholds, objectives


def train_tree(ts: TrainingSet, config: TrainingConfig, rng: np.random.Generator,
               on_node=None) -> Tree:
    """Grow one tree on every sample of ``ts``; leaves get empty vote tables.

    Nodes are numbered in depth-first order, left child first.  ``on_node``
    receives a :class:`NodeRecord` for every node that searched for a split.
    """
    if len(ts) == 0:
        raise ValueError("no training samples")
    stats = None
    if config.objective == "regression":
        st = regression_stats(ts.offsets, config.rho)
        stats = (st, *active_joints(st))
    radius = config.probe_radius * ts.focal
    features, thresholds, left, right, leaf_index = [], [], [], [], []

    def new_node():
        features.append(np.zeros(4))
        thresholds.append(0.0)
        left.append(-1)
        right.append(-1)
        leaf_index.append(-1)
        return len(features) - 1

    n_leaves = 0
    todo = [(new_node(), np.arange(len(ts)), 0)]
    while todo:
        node, idx, depth = todo.pop()
        err = node_error(ts, idx, config.objective, config.rho)
        if depth >= config.max_depth or len(idx) < 2 * config.min_samples_leaf or err <= 0.0:
            leaf_index[node] = n_leaves
            n_leaves += 1
            continue
        tests = sample_candidate_tests(rng, config.candidate_tests, radius)
        fractions = rng.random((config.candidate_tests, config.candidate_thresholds))
        thr, obj = _score_candidates(ts, idx, tests, fractions, config, stats)
        best = int(np.argmin(obj))
        t, c = divmod(best, obj.shape[1])
        chosen = (t, c) if np.isfinite(obj[t, c]) else None
        if on_node is not None:
            on_node(NodeRecord(depth, idx, tests, thr, obj, chosen, err))
        if chosen is None:
            leaf_index[node] = n_leaves
            n_leaves += 1
            continue
        features[node] = tests[t]
        thresholds[node] = thr[t, c]
        go_left = ts.responses(idx, tests[t]) < thr[t, c]
        left[node], right[node] = new_node(), new_node()
        # pushed right first so the left subtree is numbered first
        todo.append((right[node], idx[~go_left], depth + 1))
        todo.append((left[node], idx[go_left], depth + 1))

    J = ts.joint_count
    return Tree(np.array(features, np.float64), np.array(thresholds, np.float64),
                np.array(left, np.int32), np.array(right, np.int32), np.array(leaf_index, np.int32),
                np.zeros((n_leaves, J, config.k, 3)), np.zeros((n_leaves, J, config.k)),
                np.zeros((n_leaves, J), np.int32))


# ---------------------------------------------------------------------------
# leaf votes

class OffsetReservoir:
    """Uniform fixed-capacity sample of a stream (Vitter's algorithm R)."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.count = 0
        self.items = []
        self._rng = rng

    def add(self, item) -> None:
        self.count += 1
        if len(self.items) < self.capacity:
            self.items.append(item)
        else:
            j = int(self._rng.integers(0, self.count))
            if j < self.capacity:
                self.items[j] = item

    def __len__(self):
        return len(self.items)


def reservoir_indices(n: int, capacity: int, rng: np.random.Generator) -> np.ndarray:
    """Stream positions an :class:`OffsetReservoir` would hold after ``n`` items.

    Uses the same random draws as feeding the reservoir one item at a time.
    """
    if n <= capacity:
        return np.arange(n)
    kept = np.arange(capacity)
    for i in range(capacity, n):
        j = int(rng.integers(0, i + 1))
        if j < capacity:
            kept[j] = i
    return kept


def leaf_votes(offsets: np.ndarray, bandwidth: float, k: int,
               config: MeanShiftConfig = MeanShiftConfig()):
    """Cluster one reservoir of offsets; returns up to ``k`` ``(deltas, weights)``.

    Weights are cluster sizes divided by the reservoir size.
    """
    if len(offsets) == 0 or k == 0:
        return np.zeros((0, 3)), np.zeros(0)
    pos, score = mode_arrays(offsets, np.ones(len(offsets)), bandwidth, config)
    return pos[:k], score[:k] / len(offsets)


def learn_leaf_votes(tree: Tree, ts: TrainingSet, config: TrainingConfig,
                     rng: np.random.Generator) -> Tree:
    """Fill ``tree``'s vote tables in place from the samples of ``ts``; returns it."""
    leaves = tree.apply_stack(ts.stack, ts.background_depth, ts.img, ts.xs, ts.ys)
    order = np.argsort(leaves, kind="stable")  # keeps stream order within a leaf
    bounds = np.searchsorted(leaves[order], np.arange(tree.leaf_count + 1))
    J, K = ts.joint_count, config.k
    tree.votes = np.zeros((tree.leaf_count, J, K, 3))
    tree.weights = np.zeros((tree.leaf_count, J, K))
    tree.counts = np.zeros((tree.leaf_count, J), np.int32)
    for leaf in range(tree.leaf_count):
        members = order[bounds[leaf]:bounds[leaf + 1]]
        for j in range(J):
            kept = members[reservoir_indices(len(members), config.reservoir_capacity, rng)]
            deltas, weights = leaf_votes(ts.offsets[kept, j], config.cluster_bandwidth, K,
                                         config.meanshift)
            m = len(weights)
            tree.votes[leaf, j, :m] = deltas
            tree.weights[leaf, j, :m] = weights
            tree.counts[leaf, j] = m
    return tree


# ---------------------------------------------------------------------------
# forests

def tree_rng(seed: int, tree: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tree]))


def _train_one(dataset, config: TrainingConfig, t: int) -> Tree:
    start = time.perf_counter()
    rng = tree_rng(config.seed, t)
    ts = sample_pixels(dataset, config.pixels_per_image, rng)
    tree = train_tree(ts, config, rng)
    learn_leaf_votes(tree, ts, config, rng)
    logger.info("tree %d: %d nodes, %d leaves, depth %d, %.1fs", t, tree.node_count,
                tree.leaf_count, tree.depth(), time.perf_counter() - start)
    return tree


def default_threads() -> int:
    env = os.environ.get("POSEFOREST_THREADS")
    return int(env) if env else (os.cpu_count() or 1)


def train_forest(dataset, config: TrainingConfig, threads: int | None = None) -> Forest:
    """Train ``config.tree_count`` trees, each on its own pixel sample and RNG stream.

    Trees are independent, so the result does not depend on ``threads``.
    """
    config.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    J = dataset.joint_count
    lambdas, bandwidths = config.joint_params(J)
    threads = max(1, min(threads or default_threads(), config.tree_count))
    if threads == 1:
        trees = [_train_one(dataset, config, t) for t in range(config.tree_count)]
    else:
        with ThreadPoolExecutor(threads) as pool:
            trees = list(pool.map(lambda t: _train_one(dataset, config, t),
                                  range(config.tree_count)))
    meta = {"training": config.to_dict(), "focal": float(dataset[0].cam.focal_x)}
    return Forest(trees, J, config.k, lambdas, bandwidths, meta)
