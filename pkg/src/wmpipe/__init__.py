"""Performance models and simulators for a heterogeneous world-model serving pipeline."""

__version__ = "0.1.0"
