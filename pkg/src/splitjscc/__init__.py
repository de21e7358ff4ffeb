"""Split computing with on-device filter pruning and a learned joint source-channel codec.

Everything runs on a small numpy autodiff engine (:mod:`splitjscc.tensor`).
"""

from .channel import AwgnChannel, capacity, power_normalize, snr_to_sigma2
from .errors import ChecksumError, ConfigError, DimensionError, NumericError, SplitJsccError, StateError
from .models import BackboneConfig, SplitModel, build_split_model
from .tensor import Tensor, make_rng, no_grad

__version__ = "0.1.0"

__all__ = [
    "AwgnChannel",
    "BackboneConfig",
    "ChecksumError",
    "ConfigError",
    "DimensionError",
    "NumericError",
    "SplitJsccError",
    "SplitModel",
    "StateError",
    "Tensor",
    "build_split_model",
    "capacity",
    "make_rng",
    "no_grad",
    "power_normalize",
    "snr_to_sigma2",
]
