"""Repelling cycles and Julia sets of transcendental meromorphic maps."""

__version__ = "0.1.0"
