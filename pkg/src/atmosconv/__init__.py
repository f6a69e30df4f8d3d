"""Filter-normalized convolutions, gain/bias corruption benchmarks and a
small numpy training harness to compare them against vanilla convolutions."""

__version__ = "0.1.0"

from .errors import (AtmosConvError, ConfigError, ContractError, DegenerateError,  # noqa: E402
                     DivergenceError, NumericError, ShapeError, StateError)
from .filters import (FilterKernel, decompose, normalize_filter,  # noqa: E402
                      normalize_filter_bank, positive_weight_ratio, soft_reg)
from .nn import ModelConfig, build_model, load_checkpoint, save_checkpoint  # noqa: E402
from .tensor import Tensor, backward, no_grad  # noqa: E402

__all__ = [
    "AtmosConvError", "ConfigError", "ContractError", "DegenerateError", "DivergenceError",
    "NumericError", "ShapeError", "StateError", "FilterKernel", "decompose",
    "normalize_filter", "normalize_filter_bank", "positive_weight_ratio", "soft_reg",
    "ModelConfig", "build_model", "load_checkpoint", "save_checkpoint", "Tensor", "backward",
    "no_grad",
]
