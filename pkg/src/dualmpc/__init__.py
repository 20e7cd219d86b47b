"""Dual model-predictive control toolkit.

Online sparse semi-parametric Gaussian-process dynamics learning, an
information-gain exploration cost, and a sigma-point stochastic dynamic
programming trajectory optimizer, wired into a receding-horizon loop.
"""

from dualmpc.gaussmath import GaussianBelief, SigmaPointSet, chol_psd, moment_match, ut5_unit_points

__all__ = [
    "GaussianBelief",
    "SigmaPointSet",
    "chol_psd",
    "moment_match",
    "ut5_unit_points",
]
