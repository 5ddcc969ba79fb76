"""Temporal and multimodal fusion toolkit for clip-level emotion classification."""

from .data import EMOTIONS, NUM_CLASSES
from .errors import (
    ConfigError,
    ContractError,
    DimensionError,
    DomainError,
    FormatError,
    LoadError,
    TmfError,
)

__version__ = "0.1.0"

__all__ = [
    "EMOTIONS",
    "NUM_CLASSES",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "LoadError",
    "TmfError",
]
