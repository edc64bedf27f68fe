"""Cover-replicated training with permutation-routed learning messages."""

__version__ = "0.1.0"
