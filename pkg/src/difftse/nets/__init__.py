from .params import Param, save_params, load_params, load_into
from .layers import (
    Dense,
    TimeConv,
    SiLU,
    MultiplyFusion,
    ConcatChannels,
    AvgPoolFrames,
    GatedResidualBlock,
    TimeEmbedding,
    FreqEmbed,
    SqueezeAxis,
    fuse_multiply,
    silu,
)
from .graph import LayerGraph, grad_check

__all__ = [
    "Param", "save_params", "load_params", "load_into",
    "Dense", "TimeConv", "SiLU", "MultiplyFusion", "ConcatChannels",
    "AvgPoolFrames", "GatedResidualBlock", "TimeEmbedding",
    "FreqEmbed", "SqueezeAxis", "fuse_multiply", "silu",
    "LayerGraph", "grad_check",
]
