"""Clinical-text error detection, localization, and correction engine."""

__version__ = "0.1.0"
