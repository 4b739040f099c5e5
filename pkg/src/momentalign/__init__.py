"""Cross-domain video moment retrieval with multi-modal alignment training."""

__version__ = "0.1.0"
