"""Decision trees with per-joint relative votes at the leaves, and the PFR1 format.

A tree is stored as flat node arrays.  Node 0 is the root; split nodes carry
``(ux, uy, vx, vy)`` probe offsets and a threshold, leaves carry an index into
the per-leaf vote tables::

    votes[leaf, joint, k]   -> 3-D offset in metres
    weights[leaf, joint, k] -> confidence, sorted descending per (leaf, joint)
    counts[leaf, joint]     -> number of valid entries (<= K)
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .depthcore import DepthImage, SplitTest, stack_responses

PFR_MAGIC = b"PFR1"
PFR_VERSION = 1


class ForestError(ValueError):
    """Malformed tree structure or forest file."""


@dataclass(frozen=True)
class RelativeVote:
    delta: np.ndarray
    weight: float


@dataclass(frozen=True)
class LeafModel:
    votes_per_joint: list[list[RelativeVote]]


@dataclass
class Tree:
    features: np.ndarray  # (n, 4) float64
    thresholds: np.ndarray  # (n,) float64
    left: np.ndarray  # (n,) int32, -1 at leaves
    right: np.ndarray  # (n,) int32, -1 at leaves
    leaf_index: np.ndarray  # (n,) int32, -1 at splits
    votes: np.ndarray  # (n_leaves, J, K, 3) float64
    weights: np.ndarray  # (n_leaves, J, K) float64
    counts: np.ndarray  # (n_leaves, J) int32

    @property
    def node_count(self) -> int:
        return len(self.thresholds)

    @property
    def leaf_count(self) -> int:
        return len(self.counts)

    def is_leaf(self, node: int) -> bool:
        return self.left[node] < 0

    def split_test(self, node: int) -> SplitTest:
        u = self.features[node]
        return SplitTest((u[0], u[1]), (u[2], u[3]), float(self.thresholds[node]))

    def depth(self) -> int:
        depth = np.zeros(self.node_count, np.int64)
        for i in range(self.node_count):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max()) if self.node_count else 0

    def leaf_model(self, leaf: int) -> LeafModel:
        return LeafModel([
            [RelativeVote(self.votes[leaf, j, k].copy(), float(self.weights[leaf, j, k]))
             for k in range(self.counts[leaf, j])]
            for j in range(self.counts.shape[1])
        ])

    def apply_stack(self, stack, background_depth, img, xs, ys) -> np.ndarray:
        """Leaf index reached by every pixel, walking all pixels level by level."""
        n = len(xs)
        node = np.zeros(n, np.int64)
        img, xs, ys = (np.asarray(a, np.int64) for a in (img, xs, ys))
        for _ in range(self.node_count):
            active = np.flatnonzero(self.left[node] >= 0)
            if active.size == 0:
                break
            nd = node[active]
            r = stack_responses(stack, background_depth, img[active], xs[active],
                                ys[active], self.features[nd])
            node[active] = np.where(r < self.thresholds[nd], self.left[nd], self.right[nd])
        else:
            if n and np.any(self.left[node] >= 0):
                raise ForestError("tree walk did not terminate")
        return self.leaf_index[node]

    def apply(self, image: DepthImage, xs, ys) -> np.ndarray:
        return self.apply_stack(image.depths[None], image.background_depth,
                                np.zeros(len(xs), np.int64), xs, ys)

    def validate(self, joint_count: int, k: int) -> None:
        n = self.node_count
        if n == 0:
            raise ForestError("tree has no nodes")
        for name in ("features", "thresholds", "left", "right", "leaf_index"):
            if len(getattr(self, name)) != n:
                raise ForestError(f"{name} has wrong length")
        split = self.left >= 0
        if np.any(split != (self.right >= 0)):
            raise ForestError("split node with a single child")
        children = np.concatenate([self.left[split], self.right[split]])
        if np.any(children >= n) or np.any(children <= 0):
            raise ForestError("dangling or root-pointing child index")
        if len(np.unique(children)) != len(children) or len(children) != n - 1:
            raise ForestError("node array is not a single-rooted tree")
        seen = np.zeros(n, bool)
        stack = [0]
        while stack:
            i = stack.pop()
            seen[i] = True
            if split[i]:
                stack += [int(self.left[i]), int(self.right[i])]
        if not seen.all():
            raise ForestError("unreachable nodes")
        leaves = self.leaf_index[~split]
        if np.any(self.leaf_index[split] != -1) or sorted(leaves) != list(range(self.leaf_count)):
            raise ForestError("leaf indices are not a permutation of the leaf table")
        if self.votes.shape != (self.leaf_count, joint_count, k, 3):
            raise ForestError(f"vote table shape {self.votes.shape} does not match J={joint_count}, K={k}")
        if np.any(self.counts < 0) or np.any(self.counts > k):
            raise ForestError("vote count exceeds K")
        if not (np.all(np.isfinite(self.votes)) and np.all(np.isfinite(self.weights))
                and np.all(np.isfinite(self.features)) and not np.any(np.isnan(self.thresholds))):
            raise ForestError("non-finite values in tree")
        if np.any(self.weights < 0) or np.any(np.diff(self.weights, axis=2) > 0):
            raise ForestError("vote weights must be non-negative and sorted descending")

    @classmethod
    def single_leaf(cls, joint_count: int, k: int) -> "Tree":
        return cls(np.zeros((1, 4)), np.zeros(1), np.full(1, -1, np.int32),
                   np.full(1, -1, np.int32), np.zeros(1, np.int32),
                   np.zeros((1, joint_count, k, 3)), np.zeros((1, joint_count, k)),
                   np.zeros((1, joint_count), np.int32))


def descend(tree: Tree, image: DepthImage, q) -> LeafModel:
    """Walk one foreground pixel from the root to its leaf."""
    if not image.is_foreground(q):
        raise ValueError(f"pixel {q} is background")
    node = 0
    for _ in range(tree.node_count + 1):
        if not 0 <= node < tree.node_count:
            raise ForestError(f"dangling node index {node}")
        if tree.left[node] < 0:
            leaf = int(tree.leaf_index[node])
            if not 0 <= leaf < tree.leaf_count:
                raise ForestError(f"dangling leaf index {leaf}")
            return tree.leaf_model(leaf)
        r = stack_responses(image.depths[None], image.background_depth,
                            [0], [q[0]], [q[1]], tree.features[node])[0]
        node = int(tree.left[node] if r < tree.thresholds[node] else tree.right[node])
    raise ForestError("cycle in tree")


@dataclass
class Forest:
    trees: list[Tree]
    joint_count: int
    k: int
    lambdas: np.ndarray  # per-joint vote length threshold, metres
    bandwidths: np.ndarray  # per-joint aggregation bandwidth, metres
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.lambdas = np.asarray(self.lambdas, dtype=np.float64)
        self.bandwidths = np.asarray(self.bandwidths, dtype=np.float64)

    def validate(self) -> None:
        if self.joint_count <= 0 or self.k < 0:
            raise ForestError("joint_count must be positive and K non-negative")
        if self.lambdas.shape != (self.joint_count,) or self.bandwidths.shape != (self.joint_count,):
            raise ForestError("lambdas and bandwidths need one entry per joint")
        if np.any(~(self.lambdas > 0)) or np.any(~(self.bandwidths > 0)):
            raise ForestError("lambdas and bandwidths must be positive")
        for tree in self.trees:
            tree.validate(self.joint_count, self.k)

    def to_bytes(self) -> bytes:
        return serialize(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Forest":
        return deserialize(data)

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(serialize(self))

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path, "rb") as f:
            return deserialize(f.read())


_NODE_DTYPE = np.dtype([("features", "<f8", (4,)), ("threshold", "<f8"),
                        ("left", "<i4"), ("right", "<i4"), ("leaf", "<i4")])


def serialize(forest: Forest) -> bytes:
    forest.validate()
    J, K = forest.joint_count, forest.k
    meta = json.dumps(forest.metadata, sort_keys=True, separators=(",", ":")).encode()
    parts = [PFR_MAGIC, struct.pack("<III", PFR_VERSION, J, K),
             forest.lambdas.astype("<f8").tobytes(), forest.bandwidths.astype("<f8").tobytes(),
             struct.pack("<I", len(meta)), meta, struct.pack("<I", len(forest.trees))]
    for t in forest.trees:
        nodes = np.zeros(t.node_count, _NODE_DTYPE)
        nodes["features"] = t.features
        nodes["threshold"] = t.thresholds
        nodes["left"] = t.left
        nodes["right"] = t.right
        nodes["leaf"] = t.leaf_index
        # unused vote slots are zeroed so equal forests give equal bytes
        slot = np.arange(K)[None, None, :] < t.counts[:, :, None]
        votes = np.where(slot[..., None], t.votes, 0.0)
        weights = np.where(slot, t.weights, 0.0)
        parts += [struct.pack("<II", t.node_count, t.leaf_count), nodes.tobytes(),
                  t.counts.astype("<i4").tobytes(), votes.astype("<f8").tobytes(),
                  weights.astype("<f8").tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise ForestError("truncated forest data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def array(self, dtype, shape) -> np.ndarray:
        dtype = np.dtype(dtype)
        count = int(np.prod(shape))
        return np.frombuffer(self.take(count * dtype.itemsize), dtype).reshape(shape).copy()


def deserialize(data: bytes) -> Forest:
    r = _Reader(data)
    if r.take(4) != PFR_MAGIC:
        raise ForestError("not a PFR1 forest file (bad magic)")
    version, J, K = r.unpack("<III")
    if version != PFR_VERSION:
        raise ForestError(f"unsupported forest version {version}")
    lambdas = r.array("<f8", (J,))
    bandwidths = r.array("<f8", (J,))
    (meta_len,) = r.unpack("<I")
    try:
        metadata = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ForestError(f"corrupt forest metadata: {exc}") from None
    (n_trees,) = r.unpack("<I")
    trees = []
    for _ in range(n_trees):
        n_nodes, n_leaves = r.unpack("<II")
        nodes = r.array(_NODE_DTYPE, (n_nodes,))
        counts = r.array("<i4", (n_leaves, J)).astype(np.int32)
        votes = r.array("<f8", (n_leaves, J, K, 3)).astype(np.float64)
        weights = r.array("<f8", (n_leaves, J, K)).astype(np.float64)
        trees.append(Tree(nodes["features"].astype(np.float64), nodes["threshold"].astype(np.float64),
                          nodes["left"].astype(np.int32), nodes["right"].astype(np.int32),
                          nodes["leaf"].astype(np.int32), votes, weights, counts))
    if r.pos != len(data):
        raise ForestError("trailing bytes after forest data")
    forest = Forest(trees, J, K, lambdas, bandwidths, metadata)
    forest.validate()
    return forest
