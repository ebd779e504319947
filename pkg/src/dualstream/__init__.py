"""Desk-scale dual-stream perception: object queries + BEV grid with
motion-compensated temporal propagation, trained on a built-in synthetic
multi-camera driving world."""

__version__ = "0.1.0"
