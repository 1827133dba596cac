"""LoRA Dropout laboratory: masked low-rank adapters, multi-instance training,
test-time ensembles and numerical checks of their sparsity and stability theory.
"""

from .adapters import (
    AdaLoraLayer,
    Dense,
    DropoutMask,
    LoraLayer,
    MaskSet,
    MaskStream,
    apply_dropout_adalora,
    apply_dropout_lora,
    entry_zero_probability,
    merged_delta,
    sample_mask,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Dataset, DatasetSpec, generate_dataset
from .ensemble import EnsembleOutput, accuracy, ece, ensemble_predict, evaluate, single_predict
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DimensionError,
    DivergenceError,
    LabError,
    NumericalError,
    ProbeError,
)
from .model import Model, mlp, with_adapters
from .training import RunRecord, TrainConfig, explicit_regularized_loss, multi_instance_loss, train

__version__ = "0.1.0"

__all__ = [
    "AdaLoraLayer",
    "CheckpointError",
    "ConfigError",
    "ContractError",
    "Dataset",
    "DatasetSpec",
    "Dense",
    "DimensionError",
    "DivergenceError",
    "DropoutMask",
    "EnsembleOutput",
    "ExperimentConfig",
    "LabError",
    "LoraLayer",
    "MaskSet",
    "MaskStream",
    "Model",
    "NumericalError",
    "ProbeError",
    "RunRecord",
    "TrainConfig",
    "accuracy",
    "apply_dropout_adalora",
    "apply_dropout_lora",
    "ece",
    "ensemble_predict",
    "entry_zero_probability",
    "evaluate",
    "explicit_regularized_loss",
    "generate_dataset",
    "load_checkpoint",
    "merged_delta",
    "mlp",
    "multi_instance_loss",
    "sample_mask",
    "save_checkpoint",
    "single_predict",
    "train",
    "with_adapters",
]
