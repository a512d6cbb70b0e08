"""Weakly supervised contrastive spatiotemporal HOI detection on region features."""

__version__ = "0.1.0"
