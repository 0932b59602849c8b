"""Next-location prediction with attention encoders and gated
continuous-time hidden dynamics, built on a small tape-based autodiff
core with swappable compiled/numpy kernels."""

from . import kernels
from .errors import ConfigError, NumericError, ParseError, ShapeError
from .model import HistoryBatch, ModelConfig, count_params, forward, init_params
from .numerics import ParamStore, Tape, Tensor, backward
from .odeint import SolveSpec, integrate

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "NumericError",
    "ParseError",
    "ShapeError",
    "HistoryBatch",
    "ModelConfig",
    "ParamStore",
    "SolveSpec",
    "Tape",
    "Tensor",
    "backward",
    "count_params",
    "forward",
    "init_params",
    "integrate",
    "kernels",
    "__version__",
]
