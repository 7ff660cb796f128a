"""Simulated attention heads on a small numpy transformer.

Head expansion (a conv stack over the head axis), feature expansion of the
query/key vectors, and group-averaged output projection, with MHA/MQA/GQA
baselines, a reverse-mode autodiff core, training loop and experiment drivers.
"""

from .attention import AttentionConfig, extra_bias_count, extra_param_count, sas_forward
from .errors import ConfigError, NumericError, ShapeError, UsageError
from .model import ModelConfig, count_params, count_params_for_config, forward, init_params
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig", "ModelConfig", "TrainConfig", "ConfigError", "NumericError", "ShapeError",
    "UsageError", "count_params", "count_params_for_config", "extra_bias_count", "extra_param_count",
    "forward", "init_params", "sas_forward", "train",
]
