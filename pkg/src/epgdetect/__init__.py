"""Detecting epileptogenesis in single-channel EEG with a residual 1D CNN."""

__version__ = "0.1.0"
