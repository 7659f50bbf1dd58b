"""Two-stream (local map + global token) inpainting network."""

from .config import ABLATIONS, ConfigError, ModelConfig
from .checkpoint import Checkpoint, CheckpointError, checkpoint_load, checkpoint_save
from .layers import (
    StreamState,
    deformable_write,
    gif_attention,
    lif_resblock,
    patchify,
    read_op,
    scope,
    unpatchify,
    write_op,
)
from .network import (
    cross_frame_block,
    gif_init,
    init_params,
    intra_frame_block,
    lif_decode,
    lif_encode,
    model_forward,
    param_shapes,
)

__all__ = [
    "Checkpoint",
    "CheckpointError",
    "checkpoint_load",
    "checkpoint_save",
    "ABLATIONS",
    "ConfigError",
    "ModelConfig",
    "StreamState",
    "cross_frame_block",
    "deformable_write",
    "gif_attention",
    "gif_init",
    "init_params",
    "intra_frame_block",
    "lif_decode",
    "lif_encode",
    "lif_resblock",
    "model_forward",
    "param_shapes",
    "patchify",
    "read_op",
    "scope",
    "unpatchify",
    "write_op",
]
