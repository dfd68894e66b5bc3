"""Simulation and checking toolkit for flush-if-tagged persistence."""

__version__ = "0.1.0"
