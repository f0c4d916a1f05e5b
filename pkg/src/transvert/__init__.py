"""Desk-scale 2D-to-3D vertebra reconstruction from orthogonal synthetic radiographs."""

__version__ = "0.1.0"
