"""Desk-scale, search-free Xiangqi AI toolkit."""

__version__ = "0.1.0"
