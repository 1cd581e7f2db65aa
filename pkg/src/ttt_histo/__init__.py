"""Test-time training for domain-shifted patch classification, at desk scale."""

from .adapt import AdaptConfig, adabn_adapt, evaluate_with_adaptation, memo_adapt, tent_adapt, ttt_adapt
from .data import DataConfig, PatchSet, build_splits, generate_synthetic_dataset
from .estimator import TTTClassifier
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .shifts import ShiftSpec, apply_shift, shift_dataset
from .tasks import nt_xent, rsp_loss
from .training import TrainingConfig, joint_loss, lr_at, train_joint

__all__ = [
    "AdaptConfig",
    "DataConfig",
    "ModelConfig",
    "PatchSet",
    "ShiftSpec",
    "TTTClassifier",
    "TrainingConfig",
    "adabn_adapt",
    "apply_shift",
    "build_model",
    "build_splits",
    "evaluate_with_adaptation",
    "generate_synthetic_dataset",
    "joint_loss",
    "load_checkpoint",
    "lr_at",
    "memo_adapt",
    "nt_xent",
    "rsp_loss",
    "save_checkpoint",
    "shift_dataset",
    "tent_adapt",
    "train_joint",
    "ttt_adapt",
]
