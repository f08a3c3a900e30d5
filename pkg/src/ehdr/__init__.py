"""Efficient transformer-based multi-exposure HDR fusion with static cost accounting."""

__version__ = "0.1.0"
