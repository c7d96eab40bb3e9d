"""Constrained backward SDEs with jumps: simulation, solver, and condition checks."""

__version__ = "0.1.0"
