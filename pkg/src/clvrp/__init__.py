"""Continual-learning training of constructive neural solvers for TSP and CVRP across sizes."""

__version__ = "0.1.0"
