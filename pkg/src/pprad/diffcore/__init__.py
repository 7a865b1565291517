"""Minimal differentiable compute layer: 3-D conv layers, spectral norm, Adam."""

from .functional import (
    affine_forward,
    avg_pool_forward,
    conv3d_forward,
    global_avg_pool_forward,
    leaky_relu_forward,
    sigmoid_forward,
    spectral_normalize,
    transp_conv3d_forward,
)
from .gradcheck import grad_check
from .layers import (
    Affine,
    AvgPool3d,
    Conv3d,
    DownsampleBlock,
    GlobalAvgPool3d,
    LeakyReLU,
    Module,
    Parameter,
    ParamStore,
    ResidualBlock,
    Sequential,
    Sigmoid,
    TransposedConv3d,
    UpsampleBlock,
    backward,
)
from .network import Network
from .optim import AdamState, adam_step
