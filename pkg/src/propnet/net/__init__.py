from .gradcheck import GradCheckResult, grad_check
from .layers import conv_backward, conv_forward, deconv_backward, deconv_forward, relu, relu_backward
from .optim import AdamHyper, OptimizerState, adam_step
from .plnet import (
    MAE,
    MSE,
    PL_OFFSET_DB,
    PL_SCALE_DB,
    ArchSpec,
    LossReport,
    ModelWeights,
    init_weights,
    load_weights,
    masked_loss,
    plnet_backward,
    plnet_forward,
    save_weights,
)

__all__ = [
    "MAE",
    "MSE",
    "PL_OFFSET_DB",
    "PL_SCALE_DB",
    "AdamHyper",
    "ArchSpec",
    "GradCheckResult",
    "LossReport",
    "ModelWeights",
    "OptimizerState",
    "adam_step",
    "conv_backward",
    "conv_forward",
    "deconv_backward",
    "deconv_forward",
    "grad_check",
    "init_weights",
    "load_weights",
    "masked_loss",
    "plnet_backward",
    "plnet_forward",
    "relu",
    "relu_backward",
    "save_weights",
]
