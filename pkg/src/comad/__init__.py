"""Multi-teacher masked distillation with consensus gating, on a small numpy autograd."""

from .autograd import Tensor, backward, grad_check, no_grad
from .config import Config, load_config
from .data import Dataset, synthetic_dataset
from .errors import CheckpointError, ComadError, ConfigError, ContractError, DimensionError, NumericError
from .gating import GatingConfig, GatingResult, compute_gating
from .losses import LossConfig, LossReport, fuse, total_loss
from .masking import MaskSet, MaskSpec, apply_mask, sample_mask_set
from .training import CoMADModel, Trainer, linear_probe, toy_pretrain
from .vit import ViTConfig, ViTEncoder

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "grad_check",
    "no_grad",
    "Config",
    "load_config",
    "Dataset",
    "synthetic_dataset",
    "ComadError",
    "ConfigError",
    "DimensionError",
    "ContractError",
    "NumericError",
    "CheckpointError",
    "GatingConfig",
    "GatingResult",
    "compute_gating",
    "LossConfig",
    "LossReport",
    "fuse",
    "total_loss",
    "MaskSpec",
    "MaskSet",
    "apply_mask",
    "sample_mask_set",
    "CoMADModel",
    "Trainer",
    "linear_probe",
    "toy_pretrain",
    "ViTConfig",
    "ViTEncoder",
]
