"""Simulation, detection and labelling of crumbling quotes in a limit order book."""

__version__ = "0.1.0"
