"""Weakly supervised source-specific sound level estimation.

The package trains a mask-based separator from clip-level labels using
energy consistency at several time-frequency resolutions, an asymmetric
margin for background energy, and a residual-background classification
term, then scores per-class level estimates in dBFS.
"""
__version__ = "0.1.0"
