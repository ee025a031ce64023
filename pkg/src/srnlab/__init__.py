"""Soft/hard retargeting networks for CTR prediction, built on a small numpy core."""

__version__ = "0.1.0"
