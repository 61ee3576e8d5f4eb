"""Session-based next-item recommendation over a heterogeneous item/session/user graph."""

__version__ = "0.1.0"
