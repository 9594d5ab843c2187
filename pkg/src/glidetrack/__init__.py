"""Simulation, recurrent-attention instance segmentation and tracking of gliding microtubules."""

__version__ = "0.1.0"
