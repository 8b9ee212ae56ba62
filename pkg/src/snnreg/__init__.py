"""Spiking-network training workbench with a homeostatic threshold controller."""

__version__ = "0.1.0"
