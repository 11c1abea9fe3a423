"""Frame-structured AR decode engine with temporal-attention-gated MLP replay."""

__version__ = "0.1.0"
