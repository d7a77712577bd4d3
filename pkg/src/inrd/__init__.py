"""Coordinate-network (INR) fitting, encoder transfer and sparse-dictionary analysis on numpy."""

__version__ = "0.1.0"

from .errors import ContractError, ConvergenceError, InrdError, NumericError, ShapeError  # noqa: F401
