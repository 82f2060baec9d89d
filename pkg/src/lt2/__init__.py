"""Looped transformers with linear, sparse and full token mixers."""
from __future__ import annotations

from .errors import (BudgetError, ConfigError, ContractError, DimensionError, LT2Error, NumericError,
                     ParseError, TokenizerError)
from .mixers import MixerKind
from .model import BlockConfig, LoopedModel, LoopSchedule
from .scan import BACKEND
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BlockConfig", "BudgetError", "ConfigError", "ContractError", "DimensionError",
    "LT2Error", "LoopSchedule", "LoopedModel", "MixerKind", "NumericError", "ParseError", "Tensor",
    "TokenizerError", "backward", "no_grad",
]
