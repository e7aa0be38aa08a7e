"""Efficient quality-regression training: teacher self-training with staged
pseudo-labels, then distillation into a compact student."""

from .config import TrainConfig, load_config
from .metrics import EvalReport, challenge_score, plcc, srcc
from .pipeline import Pipeline, run_all

__all__ = ["EvalReport", "Pipeline", "TrainConfig", "challenge_score", "load_config", "plcc", "run_all", "srcc"]
__version__ = "0.1.0"
