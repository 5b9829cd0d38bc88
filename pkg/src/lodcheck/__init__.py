"""Level-of-detail transition checking."""

__version__ = "0.1.0"
