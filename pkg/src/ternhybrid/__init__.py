"""Ternary hybrid conv + decision-tree networks for keyword spotting at desk scale."""

__version__ = "0.1.0"
