"""Body joint localisation from single depth images with regression forests."""
from .dataset import Dataset, LabelledImage, load_manifest, synthetic
from .depthcore import CameraIntrinsics, DepthImage, SplitTest, read_dph, write_dph
from .evaluation import EvalConfig, evaluate
from .forest import Forest, ForestError, Tree
from .inference import Hypothesis, InferenceConfig, infer, infer_batch
from .meanshift import MeanShiftConfig, find_modes
from .training import TrainingConfig, load_config, train_forest

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "Dataset", "DepthImage", "EvalConfig", "Forest", "ForestError",
    "Hypothesis", "InferenceConfig", "LabelledImage", "MeanShiftConfig", "SplitTest",
    "TrainingConfig", "Tree", "evaluate", "find_modes", "infer", "infer_batch", "load_config",
    "load_manifest", "read_dph", "synthetic", "train_forest", "write_dph",
]
