# occupation_lab/__init__.py
"""Numerical lab for excess events of random-walk occupation-time fields in Z^d, d >= 3."""
__version__ = "0.1.0"
