"""Minimal differentiable substrate: embeddings, dense layers, GRU, log-loss, Adagrad."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradientCheckError, backward_check, numeric_gradient, relative_error
from .gru import GruCell, gru_forward
from .layers import (
    DTYPE,
    ConfigurationError,
    DenseLayer,
    EmbeddingTable,
    Mlp,
    Param,
    bce_with_logits,
    glorot_uniform,
    log_loss,
    log_sigmoid,
    sigmoid,
)
from .optim import Adagrad

__all__ = [
    "DTYPE",
    "Adagrad",
    "CheckpointError",
    "ConfigurationError",
    "DenseLayer",
    "EmbeddingTable",
    "GradientCheckError",
    "GruCell",
    "Mlp",
    "Param",
    "backward_check",
    "bce_with_logits",
    "glorot_uniform",
    "gru_forward",
    "load_checkpoint",
    "log_loss",
    "log_sigmoid",
    "numeric_gradient",
    "relative_error",
    "save_checkpoint",
    "sigmoid",
]
