"""Stochastically generated matrix product states: transfer maps, projective contraction, decay experiments."""
__version__ = "0.1.0"
