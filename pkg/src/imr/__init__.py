"""Incremental and iterative MapReduce runtime with preserved fine-grain state."""

__version__ = "0.1.0"
