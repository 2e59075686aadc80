"""A tiny calculator package."""

from .core import Calculator, add, percent_change
from .stats import mean, median

__all__ = ["Calculator", "add", "mean", "median", "percent_change"]
