"""Desk-scale laboratory for the mechanics of sim-and-real co-training."""

__version__ = "0.1.0"
