"""Per-joint average precision and mAP over joint hypotheses.

For one joint, all hypotheses of all images are ranked by confidence (ties:
image id, then position, lexicographically) and matched greedily: a hypothesis
is a true positive when it lies within ``radius`` (inclusive) of its image's
ground truth and that ground truth has not been claimed yet.  AP is the sum of
the precision at every true positive divided by the number of ground truths.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    radius: float = 0.1  # m
    count_occluded: bool = True
    curves_dir: str | None = None

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")


@dataclass
class JointResult:
    ap: float
    tp: int
    fp: int
    missed: int
    precision: np.ndarray
    recall: np.ndarray


@dataclass
class EvalReport:
    joint_names: list[str]
    joints: list[JointResult]
    radius: float
    extra: dict = field(default_factory=dict)

    @property
    def per_joint_ap(self) -> np.ndarray:
        return np.array([r.ap for r in self.joints])

    @property
    def mean_ap(self) -> float:
        return float(np.mean(self.per_joint_ap)) if self.joints else 0.0

    def to_dict(self) -> dict:
        return {
            "radius": self.radius, "mAP": self.mean_ap,
            "joints": [{"name": n, "ap": r.ap, "tp": r.tp, "fp": r.fp, "missed": r.missed}
                       for n, r in zip(self.joint_names, self.joints)],
            **self.extra,
        }

    def table(self) -> str:
        lines = [f"{'joint':<12} {'AP':>7} {'TP':>6} {'FP':>6} {'miss':>6}"]
        for n, r in zip(self.joint_names, self.joints):
            lines.append(f"{n:<12} {r.ap:7.4f} {r.tp:6d} {r.fp:6d} {r.missed:6d}")
        lines.append(f"{'mAP':<12} {self.mean_ap:7.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        (out / "report.txt").write_text(self.table() + "\n")
        curves = out / "pr_curves"
        curves.mkdir(exist_ok=True)
        for n, r in zip(self.joint_names, self.joints):
            with open(curves / f"{n}.csv", "w", newline="") as f:
                w = csv.writer(f)
                w.writerow(["rank", "precision", "recall"])
                for i, (p, rc) in enumerate(zip(r.precision, r.recall), 1):
                    w.writerow([i, repr(float(p)), repr(float(rc))])


def rank_order(confidences, image_ids, positions) -> np.ndarray:
    """Descending confidence; ties by image id then position."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    ids = np.asarray(image_ids)
    return np.lexsort((positions[:, 2], positions[:, 1], positions[:, 0], ids,
                       -np.asarray(confidences, dtype=np.float64)))


def match_hypotheses(image_ids, positions, confidences, ground_truth: dict,
                     radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Rank hypotheses and flag true positives.

    ``ground_truth`` maps image id to the joint's true position; images
    missing from it have no ground truth (every hypothesis there is false).
    Returns ``(order, is_tp)`` with ``order`` the ranking permutation.
    """
    order = rank_order(confidences, image_ids, positions)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    claimed = set()
    is_tp = np.zeros(len(order), bool)
    for r, h in enumerate(order):
        img = image_ids[h]
        gt = ground_truth.get(img)
        if gt is None or img in claimed:
            continue
        if np.linalg.norm(positions[h] - gt) <= radius:
            is_tp[r] = True
            claimed.add(img)
    return order, is_tp


def average_precision(is_tp, total_ground_truths: int) -> float:
    is_tp = np.asarray(is_tp, dtype=bool)
    if total_ground_truths <= 0:
        logger.warning("average precision requested with no ground truths; returning 0")
        return 0.0
    if not is_tp.any():
        return 0.0
    ranks = np.arange(1, len(is_tp) + 1)
    precision = np.cumsum(is_tp) / ranks
    return float(precision[is_tp].sum() / total_ground_truths)


def evaluate_joint(predictions, ground_truth: dict, joint: int, radius: float,
                   images=None) -> JointResult:
    """AP for one joint.  ``predictions`` maps image id to per-joint hypothesis
    lists; ``images`` restricts both hypotheses and ground truths."""
    keep = set(predictions) if images is None else set(images)
    ids, pos, conf = [], [], []
    for img, joints in predictions.items():
        if img not in keep:
            continue
        for h in joints[joint]:
            ids.append(img)
            pos.append(h["position"])
            conf.append(h["confidence"])
    gts = {img: np.asarray(g, dtype=np.float64) for img, g in ground_truth.items() if img in keep}
    order, is_tp = match_hypotheses(ids, np.array(pos).reshape(-1, 3), conf, gts, radius)
    ranks = np.arange(1, len(is_tp) + 1)
    tp = int(is_tp.sum())
    return JointResult(
        ap=average_precision(is_tp, len(gts)), tp=tp, fp=int(len(is_tp) - tp),
        missed=len(gts) - tp, precision=np.cumsum(is_tp) / ranks if len(ranks) else np.zeros(0),
        recall=np.cumsum(is_tp) / max(len(gts), 1))


def _prediction_map(records, dataset) -> dict:
    preds = {r["id"]: r["joints"] for r in records}
    ids = [item.id for item in dataset]
    if sorted(preds) != sorted(ids) or len(preds) != len(records):
        missing = sorted(set(ids) - set(preds))[:5]
        extra = sorted(set(preds) - set(ids))[:5]
        raise ValueError(f"prediction ids do not match the dataset (missing {missing}, extra {extra})")
    return preds


def evaluate(records, dataset, config: EvalConfig = EvalConfig(), joint_names=None,
             images=None) -> EvalReport:
    """Per-joint AP and mAP for JSON-lines prediction records against ``dataset``.

    ``images`` optionally restricts the evaluation to a subset of image ids.
    """
    preds = _prediction_map(records, dataset)
    J = dataset.joint_count
    names = list(joint_names) if joint_names else [f"joint{j}" for j in range(J)]
    results = []
    for j in range(J):
        gts = {item.id: item.joints[j] for item in dataset
               if config.count_occluded or item.visible[j]}
        subset = set(preds) if images is None else set(images)
        if not config.count_occluded:
            # hypotheses for hidden joints are neither rewarded nor penalised
            subset &= set(gts)
        results.append(evaluate_joint(preds, gts, j, config.radius, subset))
    report = EvalReport(names, results, config.radius)
    if config.curves_dir:
        report.write(config.curves_dir)
    return report


def occlusion_split(records, dataset, joint: int, radius: float = 0.1, images=None):
    """``(occluded AP, visible AP, n occluded, n visible)`` for one joint class."""
    preds = _prediction_map(records, dataset)
    pool = [item for item in dataset if images is None or item.id in images]
    gts = {item.id: item.joints[joint] for item in pool}
    occ = [item.id for item in pool if not item.visible[joint]]
    vis = [item.id for item in pool if item.visible[joint]]
    ap_occ = evaluate_joint(preds, gts, joint, radius, occ).ap if occ else float("nan")
    ap_vis = evaluate_joint(preds, gts, joint, radius, vis).ap if vis else float("nan")
    return ap_occ, ap_vis, len(occ), len(vis)
