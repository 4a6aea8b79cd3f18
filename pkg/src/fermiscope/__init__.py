"""Reconstruction and entanglement analysis of fermionic states from correlations."""

__version__ = "0.1.0"
