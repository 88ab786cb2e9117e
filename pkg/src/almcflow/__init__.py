"""Annealed Langevin particles feeding a probability-flow ODE sampler."""

__version__ = "0.1.0"
