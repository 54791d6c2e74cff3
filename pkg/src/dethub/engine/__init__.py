"""Training, evaluation, checkpoints and the ablation harness."""

from .evaluate import EvalReport, compute_map, evaluate
from .train import TrainResult, lr_at, read_metrics, train

__all__ = ["EvalReport", "TrainResult", "compute_map", "evaluate", "lr_at", "read_metrics", "train"]
