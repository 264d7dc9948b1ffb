"""Model definition, reference forward and checkpoint I/O."""
from .model import (
    ConfigError, ModelConfig, ModelParams, encoder_layer_forward, flops_estimate, flops_formula,
    forward_with_trace, init_params, mhsa_forward, model_backward, model_forward, param_count,
    param_shapes,
)
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint

__all__ = [
    "Checkpoint", "CheckpointError", "ConfigError", "ModelConfig", "ModelParams",
    "encoder_layer_forward", "flops_estimate", "flops_formula", "forward_with_trace",
    "init_params", "load_checkpoint", "mhsa_forward", "model_backward", "model_forward",
    "param_count", "param_shapes", "save_checkpoint",
]
