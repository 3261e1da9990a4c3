"""Simulator of zero-field J-oscillators under delayed digital feedback."""
__version__ = "0.1.0"
