import numpy as np
import pytest
from hypothesis import given, strategies as st

from poseforest.depthcore import DepthImage
from poseforest.forest import Forest, ForestError, Tree, descend, deserialize, serialize

from oracles import naive_leaf, random_forest, random_image


def _stump(tau, J=1, K=1):
    # root splits on u=(2,0) minus v=(0,0); leaf 0 left, leaf 1 right
    t = Tree(np.array([[2.0, 0, 0, 0], [0] * 4, [0] * 4], float), np.array([tau, 0, 0], float),
             np.array([1, -1, -1], np.int32), np.array([2, -1, -1], np.int32),
             np.array([-1, 0, 1], np.int32), np.zeros((2, J, K, 3)), np.zeros((2, J, K)),
             np.ones((2, J), np.int32))
    t.votes[0, 0, 0] = [1, 0, 0]
    t.votes[1, 0, 0] = [0, 1, 0]
    t.weights[:] = 1.0
    return t


def _two_level_image():
    d = np.full((3, 4), 1000, np.uint16)
    d[1, 3] = 1200  # probe (1+2, 1) sees 1200, centre sees 1000: response 200
    return DepthImage(d)


def test_single_leaf_reached_everywhere(rng):
    t = Tree.single_leaf(2, 1)
    img = random_image(rng, 6, 5, 1.0)
    xs, ys = img.foreground_pixels()
    assert np.all(t.apply(img, xs, ys) == 0)


def test_stump_left_and_right_at_boundary():
    img = _two_level_image()
    assert np.array_equal(descend(_stump(201.0), img, (1, 1)).votes_per_joint[0][0].delta, [1, 0, 0])
    assert np.array_equal(descend(_stump(200.0), img, (1, 1)).votes_per_joint[0][0].delta, [0, 1, 0])


@given(st.integers(0, 2**32 - 1))
def test_batched_descent_matches_naive(seed):
    rng = np.random.default_rng(seed)
    f = random_forest(rng, 2, 4)
    img = random_image(rng, 9, 7)
    xs, ys = img.foreground_pixels()
    for t in f.trees:
        got = t.apply(img, xs, ys)
        for s in range(len(xs)):
            assert got[s] == naive_leaf(t, img.depths, 10000, xs[s], ys[s])


@given(st.integers(0, 2**32 - 1))
def test_round_trip_exact(seed):
    rng = np.random.default_rng(seed)
    f = random_forest(rng, int(rng.integers(0, 3)), 3, J=4, K=3)
    f.metadata = {"note": "x", "n": 3}
    g = deserialize(serialize(f))
    assert serialize(g) == serialize(f)
    assert g.metadata == f.metadata
    for a, b in zip(f.trees, g.trees):
        for name in ("features", "thresholds", "left", "right", "leaf_index", "votes", "weights", "counts"):
            assert np.array_equal(getattr(a, name), getattr(b, name))


def test_empty_forest_round_trip():
    f = Forest([], 16, 2, np.full(16, 0.3), np.full(16, 0.05))
    g = Forest.from_bytes(f.to_bytes())
    assert g.trees == [] and g.joint_count == 16 and np.array_equal(g.lambdas, f.lambdas)


def test_corrupt_files_rejected(tmp_path, rng):
    data = serialize(random_forest(rng, 1, 2))
    with pytest.raises(ForestError):
        deserialize(b"XXXX" + data[4:])
    with pytest.raises(ForestError):
        deserialize(data[:-1])
    with pytest.raises(ForestError):
        deserialize(data + b"\0")
    (tmp_path / "m.pfr").write_bytes(data)
    assert Forest.load(tmp_path / "m.pfr").to_bytes() == data


def test_validate_catches_bad_structure():
    t = _stump(0.0)
    t.validate(1, 1)
    t.right[0] = 1  # both children the same node
    with pytest.raises(ForestError):
        t.validate(1, 1)
    t = _stump(0.0)
    t.counts[0, 0] = 2
    with pytest.raises(ForestError):
        t.validate(1, 1)


def test_descend_dangling_index():
    t = _stump(0.0)
    t.right[0] = 7  # response 200 >= 0 goes right
    with pytest.raises(ForestError):
        descend(t, _two_level_image(), (1, 1))


def test_depth_and_counts(rng):
    t = random_forest(rng, 1, 3).trees[0]
    assert t.depth() <= 3
    assert t.leaf_count == (t.node_count + 1) // 2
