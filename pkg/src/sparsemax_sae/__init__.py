"""Sparse autoencoders with a cross-attention sparsemax encoder, plus MLP baselines."""

from .activations import (
    JumpReluParams,
    SparseCode,
    batch_topk,
    jumprelu,
    relu,
    softmax,
    sparsemax,
    sparsemax_oracle,
    sparsemax_rows,
    sparsemax_vjp,
    topk,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .data import SuperpositionSpec, gen_superposition, read_activations, write_activations
from .metrics import MetricsReport, evaluate
from .models import AttnSae, MlpSae, build_model
from .training import TrainConfig, TrainState, train

__version__ = "0.1.0"
