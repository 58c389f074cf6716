"""Causal speech enhancement with inplace convolutions and two-axis state-space layers."""
from .errors import ArgumentError, FormatError, NumericError, SicrnError, UsageError
from .model import SICRNConfig, SICRNModel, load_checkpoint, save_checkpoint

__all__ = [
    "ArgumentError", "FormatError", "NumericError", "SicrnError", "UsageError",
    "SICRNConfig", "SICRNModel", "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
