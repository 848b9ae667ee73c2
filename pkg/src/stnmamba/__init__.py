"""Video anomaly detection with selective state-space blocks and multi-level memory banks."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, ModeError, NumericError, ShapeError
from .ssm import SS2D, cross_merge, cross_scan, selective_scan, selective_scan_chunked
from .memory import MemoryBank
from .model import ModelConfig, STNMamba, count_parameters, load_checkpoint, save_checkpoint
from .scoring import anomaly_scores, frame_level_auc, psnr_score
from .train import TrainConfig, train
from .evaluate import evaluate, score_split

__all__ = [
    "ConfigError", "DataError", "ModeError", "NumericError", "ShapeError",
    "SS2D", "cross_merge", "cross_scan", "selective_scan", "selective_scan_chunked",
    "MemoryBank", "ModelConfig", "STNMamba", "count_parameters", "load_checkpoint",
    "save_checkpoint", "anomaly_scores", "frame_level_auc", "psnr_score",
    "TrainConfig", "train", "evaluate", "score_split",
]
