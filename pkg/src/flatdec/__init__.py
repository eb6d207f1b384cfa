"""flatdec: triangular decomposition and flat-output search for control systems."""

__version__ = "0.1.0"
