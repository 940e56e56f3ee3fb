"""Task-conditioned generation and execution of multi-agent collaboration graphs."""

__version__ = "0.1.0"
