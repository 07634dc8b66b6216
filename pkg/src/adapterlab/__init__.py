"""Bottleneck adapters versus full fine-tuning on a small numpy transformer."""

from .errors import AdapterLabError, ConfigError, DataError, DimensionError, SchemaError, TrainingError, UsageError
from .model import AdapterConfig, Model, ModelConfig, adapter_param_fraction, build_model, set_trainable
from .tensor import Tensor, no_grad

__all__ = [
    "AdapterConfig", "AdapterLabError", "ConfigError", "DataError", "DimensionError", "Model", "ModelConfig",
    "SchemaError", "Tensor", "TrainingError", "UsageError", "adapter_param_fraction", "build_model", "no_grad",
    "set_trainable",
]

__version__ = "0.1.0"
