"""Scale-aware time-series representation learning.

Series are tokenized into non-overlapping windows of (normalized shape,
mean, std); the two scalars are embedded by a multi-scale linear+LayerNorm
ensemble so arbitrary magnitudes survive normalization; a small Transformer
encoder with BYOL pretraining produces the representations.  All math runs
on the package's own reverse-mode autodiff tensor core.
"""

from .byol import ByolConfig, byol_loss, momentum_update, pretrain
from .model import ModelConfig, classify, cls_attention, encode
from .nme import NmeConfig, basic_block, nme_embed, scale_weights
from .optim import LrSchedule, OptimizerState, adamw_step, lr_at
from .tensor import Tensor, backward, layer_norm, matmul, softmax
from .tokenizer import (
    RawSeries,
    TokenGrid,
    WindowToken,
    decompose,
    random_resized_crop,
    reconstruct,
    resize_linear,
)

__version__ = "0.1.0"

__all__ = [
    "ByolConfig", "LrSchedule", "ModelConfig", "NmeConfig", "OptimizerState",
    "RawSeries", "Tensor", "TokenGrid", "WindowToken", "adamw_step",
    "backward", "basic_block", "byol_loss", "classify", "cls_attention",
    "decompose", "encode", "layer_norm", "lr_at", "matmul", "momentum_update",
    "nme_embed", "pretrain", "random_resized_crop", "reconstruct",
    "resize_linear", "scale_weights", "softmax",
]
