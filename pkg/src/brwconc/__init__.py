"""Concentration inequalities for random walks and branching random walks
with position-dependent drift and branching: bound evaluators, variance
recurrences and Monte Carlo verification engines."""

__version__ = "0.1.0"
