"""Pose-sequence sign recognition with a compact transformer encoder."""

__version__ = "0.1.0"
