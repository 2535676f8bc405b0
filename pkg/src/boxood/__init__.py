"""Object-wise outlier synthesis and energy-based OOD detection."""

__version__ = "0.1.0"
