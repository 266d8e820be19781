"""Retrieval-head detection, ablation and contrastive preference training for
small decoder-only transformers."""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    EMPTY_MASK,
    HeadId,
    HeadMask,
    ModelConfig,
    ModelParams,
    apply_head_mask,
    forward,
    init_params,
    loss_and_grads,
    sequence_logprob,
)
from .decode import DecodeConfig, decode  # noqa: E402
from .checkpoint import load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "EMPTY_MASK", "HeadId", "HeadMask", "ModelConfig", "ModelParams", "apply_head_mask",
    "forward", "init_params", "loss_and_grads", "sequence_logprob", "DecodeConfig", "decode",
    "load_checkpoint", "save_checkpoint", "__version__",
]
