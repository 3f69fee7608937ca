import numpy as np
import pytest
from hypothesis import assume, given, strategies as st

from poseforest.dataset import Dataset, LabelledImage
from poseforest.depthcore import CameraIntrinsics, DepthImage
from poseforest.evaluation import (EvalConfig, average_precision, evaluate, match_hypotheses,
                                   occlusion_split)

from oracles import naive_ap


def _tp(ids, pos, conf, gts, radius=0.1):
    order, tp = match_hypotheses(ids, np.asarray(pos, float), conf, gts, radius)
    return tp


def test_exact_hit_is_tp():
    assert _tp(["a"], [[1, 2, 3]], [1.0], {"a": np.array([1, 2, 3.0])}).tolist() == [True]


def test_only_one_match_per_ground_truth():
    gt = {"a": np.zeros(3)}
    tp = _tp(["a", "a"], [[0.05, 0, 0], [0.01, 0, 0]], [2.0, 1.0], gt)
    assert tp.tolist() == [True, False]


def test_closed_ball():
    assert _tp(["a"], [[0.5, 0, 0]], [1.0], {"a": np.zeros(3)}, radius=0.5).tolist() == [True]


def test_ap_examples():
    assert average_precision([True, True], 2) == 1.0
    assert average_precision([], 3) == 0.0
    assert average_precision([True, False, True], 2) == pytest.approx(5 / 6)


def test_ap_no_ground_truth_warns(caplog):
    assert average_precision([False], 0) == 0.0
    assert "no ground truths" in caplog.text


def _dataset(n=4, J=2, seed=0):
    rng = np.random.default_rng(seed)
    cam = CameraIntrinsics(10, 10, 1, 1)
    return Dataset([LabelledImage(f"{i:03d}", DepthImage.blank(3, 3), cam,
                                  rng.uniform(-1, 1, (J, 3)), rng.random(J) > 0.3)
                    for i in range(n)])


def _records(data, fn):
    return [{"id": it.id, "joints": [fn(it, j) for j in range(len(it.joints))]} for it in data]


def test_perfect_predictions():
    data = _dataset()
    recs = _records(data, lambda it, j: [{"position": it.joints[j].tolist(), "confidence": 1.0}])
    rep = evaluate(recs, data)
    assert rep.mean_ap == 1.0 and np.all(rep.per_joint_ap == 1.0)


def test_empty_predictions():
    data = _dataset()
    assert evaluate(_records(data, lambda it, j: []), data).mean_ap == 0.0


def test_id_mismatch_raises():
    data = _dataset()
    recs = _records(data, lambda it, j: [])
    recs[0]["id"] = "zzz"
    with pytest.raises(ValueError):
        evaluate(recs, data)


def test_visible_only_ignores_hidden_joints():
    data = _dataset(n=6)
    recs = _records(data, lambda it, j: [{"position": (it.joints[j] + (0 if it.visible[j] else 1)).tolist(),
                                          "confidence": 1.0}])
    assert evaluate(recs, data, EvalConfig(count_occluded=False)).mean_ap == 1.0
    assert evaluate(recs, data).mean_ap < 1.0


def _random_hyps(seed):
    rng = np.random.default_rng(seed)
    data = _dataset(n=int(rng.integers(1, 8)), J=1, seed=seed)
    hyps = []
    for it in data:
        for _ in range(int(rng.integers(0, 4))):
            hyps.append((it.id, it.joints[0] + rng.normal(0, 0.08, 3),
                         float(rng.integers(0, 4))))  # coarse confidences force ties
    return data, hyps


def _to_records(data, hyps):
    by_id = {it.id: [] for it in data}
    for img, pos, c in hyps:
        by_id[img].append({"position": list(pos), "confidence": c})
    return [{"id": k, "joints": [v]} for k, v in by_id.items()]


@given(st.integers(0, 2**32 - 1))
def test_matches_naive_oracle(seed):
    data, hyps = _random_hyps(seed)
    rep = evaluate(_to_records(data, hyps), data)
    gts = {it.id: it.joints[0] for it in data}
    assert abs(rep.mean_ap - naive_ap(hyps, gts, 0.1)) <= 1e-9
    assert 0.0 <= rep.mean_ap <= 1.0


@given(st.integers(0, 2**32 - 1))
def test_permutation_safety(seed):
    data, hyps = _random_hyps(seed)
    shuffled = list(hyps)
    np.random.default_rng(seed).shuffle(shuffled)
    a = evaluate(_to_records(data, hyps), data).mean_ap
    b = evaluate(_to_records(data, shuffled), data).mean_ap
    assert a == b


@given(st.integers(0, 2**32 - 1))
def test_adding_correct_top_hypothesis_never_hurts(seed):
    data, hyps = _random_hyps(seed)
    before = evaluate(_to_records(data, hyps), data).mean_ap
    # "correct" means it finds a ground truth nobody has claimed yet
    gts = {it.id: it.joints[0] for it in data}
    order, tp = match_hypotheses([h[0] for h in hyps], np.array([h[1] for h in hyps]).reshape(-1, 3),
                                 [h[2] for h in hyps], gts, 0.1)
    claimed = {hyps[i][0] for i, hit in zip(order, tp) if hit}
    free = [it for it in data if it.id not in claimed]
    assume(free)
    it = free[0]
    extra = hyps + [(it.id, it.joints[0], 100.0)]
    assert evaluate(_to_records(data, extra), data).mean_ap >= before


def test_report_files(tmp_path):
    data = _dataset()
    recs = _records(data, lambda it, j: [{"position": it.joints[j].tolist(), "confidence": 0.5}])
    rep = evaluate(recs, data, EvalConfig(curves_dir=str(tmp_path / "r")), joint_names=["a", "b"])
    assert (tmp_path / "r" / "report.json").exists()
    assert (tmp_path / "r" / "pr_curves" / "b.csv").read_text().startswith("rank,precision,recall")
    assert "mAP" in rep.table()


def test_occlusion_split_counts():
    data = _dataset(n=10, J=1)
    recs = _records(data, lambda it, j: [{"position": it.joints[j].tolist(), "confidence": 1.0}])
    occ, vis, n_occ, n_vis = occlusion_split(recs, data, 0)
    assert n_occ + n_vis == 10
    assert vis == 1.0 and (occ == 1.0 or n_occ == 0)
