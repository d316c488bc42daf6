"""Infrared/visible fusion with dual critics and a jointly trained detector."""

__version__ = "0.1.0"
