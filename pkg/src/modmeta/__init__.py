"""Modulated structure-preserving dynamics models and meta-learning."""
__version__ = "0.1.0"
