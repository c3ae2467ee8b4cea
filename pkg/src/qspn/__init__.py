"""Hierarchical mesh routing with tracer packets, plus a deterministic simulator."""

__version__ = "0.1.0"
