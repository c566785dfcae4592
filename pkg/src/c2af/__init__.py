"""Correlative channel-aware fusion (C2AF) for multi-view time-series classification."""

from .data import MultiViewDataset, SynthConfig, load_container, parse_confusions, save_container, synth_generate
from .fusion import ABLATION_MODES, HEAD_MODES
from .metrics import EvalReport, accuracy, confusion
from .training import TrainConfig, evaluate, load_checkpoint, run_training, save_checkpoint

__all__ = [
    "ABLATION_MODES",
    "HEAD_MODES",
    "EvalReport",
    "MultiViewDataset",
    "SynthConfig",
    "TrainConfig",
    "accuracy",
    "confusion",
    "evaluate",
    "load_checkpoint",
    "load_container",
    "parse_confusions",
    "run_training",
    "save_checkpoint",
    "save_container",
    "synth_generate",
]
