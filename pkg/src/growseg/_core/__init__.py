"""Compiled neighbor-search core with a pure-NumPy fallback."""
