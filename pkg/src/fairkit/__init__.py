"""fairkit: evaluate and impose group fairness on tabular models.

Subpackages cover dataset handling and discretization grids, fairness
metrics, 1-D optimal-transport score repair, constrained fair empirical
risk minimization over linear/kernel models, linear structural equation
models with path-specific counterfactuals, and fair multitask learning.
"""

__version__ = "0.1.0"

from . import causal, dataset, ferm, metrics, multitask, transport  # noqa: F401
