"""Slide-level growth-pattern classification with class-specific gated-attention MIL."""

from milgrade.errors import (
    ContractError,
    DataError,
    DimensionError,
    DomainError,
    FormatError,
    MilgradeError,
    NumericError,
    UsageError,
)

__version__ = "0.1.0"

SLIDE_CLASSES = ("lepidic", "acinar", "papillary", "micropapillary", "solid")
PATCH_CLASSES = ("background",) + SLIDE_CLASSES

__all__ = [
    "ContractError",
    "DataError",
    "DimensionError",
    "DomainError",
    "FormatError",
    "MilgradeError",
    "NumericError",
    "UsageError",
    "SLIDE_CLASSES",
    "PATCH_CLASSES",
]
