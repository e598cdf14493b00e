"""Simulation and estimation toolkit for Brownian bees and N-BBM with drift."""

__version__ = "0.1.0"
