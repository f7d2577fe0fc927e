"""Momentum-contrast pretraining with intermediate-feature losses, plus feature analysis tools."""

__version__ = "0.1.0"
