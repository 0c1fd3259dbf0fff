"""Two-level group convolution: operators, gradients, a simulated distributed executor,
parameter accounting and a small training harness."""

__version__ = "0.1.0"

from .conv_ops import (
    GroupSpec,
    ProtoCoarseParams,
    TwoLevelParams,
    channel_shuffle,
    channel_unshuffle,
    coarse_combined_apply,
    coarse_proto_apply,
    coarse_restrict,
    group_conv,
    standard_conv,
    subsume_prototype,
    two_level,
    two_level_proto,
)
from .errors import ConfigurationError, DivergenceError, IngestionError, ProtocolError
from .tensor import conv1x1, conv2d

__all__ = [
    "ConfigurationError", "DivergenceError", "GroupSpec", "IngestionError", "ProtoCoarseParams",
    "ProtocolError", "TwoLevelParams", "channel_shuffle", "channel_unshuffle", "coarse_combined_apply",
    "coarse_proto_apply", "coarse_restrict", "conv1x1", "conv2d", "group_conv", "standard_conv",
    "subsume_prototype", "two_level", "two_level_proto", "__version__",
]
