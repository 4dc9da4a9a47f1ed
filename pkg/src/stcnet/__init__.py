"""Spatio-temporal channel correlation networks on a numpy autodiff core."""

from .arch import ArchConfig, ModelGraph, build, param_count, preset, shape_check
from .errors import (CompatibilityError, ConfigError, ContractError, DataError, FormatError, FreezeViolation,
                     LabelError, NumericError, ShapeError, STCError, TemporalShapeError)
from .stc import BranchMode, STCBlockParams, stc_forward
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"
