"""Experiment orchestration: configs, checkpoints, pipelines and reports."""

from .checkpoint import Checkpoint, load_checkpoint, restore, save_checkpoint
from .config import ExperimentConfig, config_from_dict, load_config
from .report import emit_report, fmt_percent, merge_reports
from .runner import run_classify, run_pretrain, run_segment

__all__ = [
    "Checkpoint",
    "ExperimentConfig",
    "config_from_dict",
    "emit_report",
    "fmt_percent",
    "load_checkpoint",
    "load_config",
    "merge_reports",
    "restore",
    "run_classify",
    "run_pretrain",
    "run_segment",
    "save_checkpoint",
]
