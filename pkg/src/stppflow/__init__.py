"""Spatio-temporal point process models with normalizing-flow mark densities.

All numerics run in double precision on CPU.
"""

import torch

torch.set_default_dtype(torch.float64)

from .odeint import SolverConfig, OdeSolution, IntervalBatch, solve, solve_batch_unit, dense_eval

__all__ = [
    "SolverConfig",
    "OdeSolution",
    "IntervalBatch",
    "solve",
    "solve_batch_unit",
    "dense_eval",
]
