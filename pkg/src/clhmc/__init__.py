"""Ensemble filters with Hamiltonian Monte Carlo analysis steps.

Gaussian-mixture (cluster) priors, multi-chain sampling, a deterministic
ensemble Kalman baseline and a quasi-geostrophic test model.
"""

from ._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
