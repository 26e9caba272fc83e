"""Desk-scale Conformer CTC/AED recognizer with top-1 mixture-of-experts routing."""

__version__ = "0.1.0"
