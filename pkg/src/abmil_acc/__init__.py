"""Attention-based MIL training with memory-bounded gradient accumulation."""

__version__ = "0.1.0"
