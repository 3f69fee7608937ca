"""Joints hidden behind crossed arms are still located.

Votes come from every body pixel, not just the pixels on the joint, so a
joint that the camera cannot see still collects evidence from its
neighbourhood.  Run:  python demos/03_hidden_joints.py
"""
import numpy as np

from poseforest import dataset as ds
from poseforest.evaluation import occlusion_split
from poseforest.inference import InferenceConfig, infer_batch
from poseforest.synthdata import JOINT_NAMES
from poseforest.training import TrainingConfig, train_forest

train = ds.synthetic(200, seed=1)
forest = train_forest(train, TrainingConfig(tree_count=2, max_depth=10, seed=0))

crossed = ds.synthetic(60, seed=3, scenario_mix="arms-crossed")
records = [r.to_record() for r in infer_batch(crossed, forest, InferenceConfig())]

hidden = np.array([~item.visible for item in crossed])
print("share of arms-crossed images in which each joint is hidden:")
for j in np.flatnonzero(hidden.any(axis=0)):
    print(f"  {JOINT_NAMES[j]:<10} {hidden[:, j].mean():.0%}")

print("\nAP at 10 cm, hidden vs visible instances of the same joint:")
for j in np.flatnonzero(hidden.any(axis=0)):
    ap_h, ap_v, n_h, n_v = occlusion_split(records, crossed, j, 0.1)
    print(f"  {JOINT_NAMES[j]:<10} hidden {ap_h:.3f} (n={n_h})   visible {ap_v:.3f} (n={n_v})")
