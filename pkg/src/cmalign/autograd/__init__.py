"""Minimal reverse-mode differentiation for the operations this package uses."""
from . import ops
from .check import finite_diff_check, numeric_gradient
from .tape import AutogradError, NumericError, Tape, Var, backward

__all__ = [
    "AutogradError", "NumericError", "Tape", "Var", "backward",
    "finite_diff_check", "numeric_gradient", "ops",
]
