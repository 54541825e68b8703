"""Simulation and quasi-stationary estimation for a coupled mutation-lag /
population-size jump diffusion.

Layers:

- model:   parameter families, drift/intensity evaluation, hypothesis checks
- rng:     keyed counter-based random streams
- pathsim: exact-thinning path simulation (single path and conditioned paths)
- cohort:  vectorized many-path engine shared by the estimators
- qsd:     Fleming-Viot ensembles and the alpha / lambda0 / eta / beta stack
- oracle:  independent grid-generator cross-check (d = 1)
- cli:     command-line entry points and artifact writers
"""
from __future__ import annotations

__version__ = "0.1.0"
