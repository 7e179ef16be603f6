"""Local-feature face-manipulation detector with a small numpy autograd core."""

__version__ = "0.1.0"
