"""Pillar BEV encoding, selective state-space backbone, and center-based 3D detection."""

__version__ = "0.1.0"
