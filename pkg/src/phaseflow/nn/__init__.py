from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .layers import (
    BlockParams,
    GmuParams,
    LdamConfig,
    StageParams,
    conv1d_dilated,
    gmu_forward,
    ldam_loss,
    mstcn_forward,
    receptive_field,
    residual_block_forward,
    stage_forward,
)
from .optim import AdamState, adam_step, zero_grad
from .tensor import Tensor, no_grad

__all__ = [
    "AdamState",
    "BlockParams",
    "CheckpointError",
    "GmuParams",
    "LdamConfig",
    "StageParams",
    "Tensor",
    "adam_step",
    "check_gradients",
    "conv1d_dilated",
    "gmu_forward",
    "ldam_loss",
    "load_checkpoint",
    "mstcn_forward",
    "no_grad",
    "numeric_gradient",
    "receptive_field",
    "relative_error",
    "residual_block_forward",
    "save_checkpoint",
    "stage_forward",
    "zero_grad",
]
