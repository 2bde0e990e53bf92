"""Profit-aware learning-to-rank for risky-trader detection, on a numpy autodiff core."""

__version__ = "0.1.0"
