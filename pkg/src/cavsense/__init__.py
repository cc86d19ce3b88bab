"""Noise-aware Dicke-state preparation in a cavity and its use for field sensing."""

__version__ = "0.1.0"
