"""Desk-scale multi-teacher 2D-to-3D feature distillation with uncertainty-weighted objectives."""

from .errors import (
    Agglom3DError, CapacityError, ConfigError, ContractError, DimensionError, FormatError, NonFiniteError,
    ValidationError,
)

__version__ = "0.1.0"

__all__ = [
    "Agglom3DError", "CapacityError", "ConfigError", "ContractError", "DimensionError", "FormatError",
    "NonFiniteError", "ValidationError", "__version__",
]
