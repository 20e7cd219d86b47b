"""Gaussian belief algebra and fifth-degree sigma-point integration.

Shared numerical substrate: Gaussian mean/covariance pairs, a fully
symmetric degree-5 cubature rule for standard-normal expectations, robust
Cholesky factorization, and sigma-point moment matching of nonlinear maps
with additive state-dependent noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg


class NotPositiveSemidefiniteError(ValueError):
    """Covariance could not be factorized even at the maximum jitter."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


@dataclass(frozen=True)
class GaussianBelief:
    """Mean/covariance pair for a state or state-action distribution.

    cov must be symmetric (1e-12 relative) and positive semidefinite up to
    a -1e-10 * trace eigenvalue tolerance.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        n = mean.shape[0]
        if mean.ndim != 1 or cov.shape != (n, n):
            raise ValueError(f"shape mismatch: mean {mean.shape}, cov {cov.shape}")
        scale = max(np.max(np.abs(cov)), 1.0)
        if np.max(np.abs(cov - cov.T)) > 1e-12 * scale:
            raise ValueError("covariance is not symmetric within tolerance")
        # PSD check: small dims throughout, eigvalsh is cheap.
        trace = np.trace(cov)
        if n > 0 and np.min(np.linalg.eigvalsh(cov)) < -1e-10 * max(trace, 1.0):
            raise ValueError("covariance has a significantly negative eigenvalue")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class SigmaPointSet:
    """Unit sigma points and weights for standard-normal expectations.

    points has shape (N, dim); weights (N,) sum to one and reproduce the
    standard-normal moments up to total degree 5. Weights may be negative
    for dim > 4.
    """

    dim: int
    points: np.ndarray
    weights: np.ndarray

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def locations(self, belief: GaussianBelief) -> tuple[np.ndarray, np.ndarray]:
        """Affinely place the unit points at mu + L eps for the belief.

        Returns (chi, L) with chi of shape (N, dim).
        """
        if belief.dim != self.dim:
            raise ValueError(f"dimension mismatch: rule {self.dim}, belief {belief.dim}")
        L = chol_psd(belief.cov)
        return belief.mean + self.points @ L.T, L


def ut5_unit_points(n: int) -> SigmaPointSet:
    """Fully symmetric degree-5 cubature rule for the standard normal in n dims.

    Layout: one center point, 2n axial points at +/- sqrt(3) e_i, and
    2n(n-1) pair points at sqrt(3)(+/- e_i +/- e_j) for i < j, giving
    2n^2 + 1 points total. The center weight 1 + (n^2 - 7n)/18 turns
    negative for n > 4, which is accepted by design.
    """
    if n < 1:
        raise ValueError(f"dimension must be >= 1, got {n}")
    s = np.sqrt(3.0)
    points = [np.zeros(n)]
    weights = [1.0 + (n * n - 7.0 * n) / 18.0]
    for i in range(n):
        e = np.zeros(n)
        e[i] = s
        points.append(e)
        weights.append((4.0 - n) / 18.0)
    for i in range(n):
        e = np.zeros(n)
        e[i] = -s
        points.append(e)
        weights.append((4.0 - n) / 18.0)
    for i in range(n):
        for j in range(i + 1, n):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    e = np.zeros(n)
                    e[i] = si * s
                    e[j] = sj * s
                    points.append(e)
                    weights.append(1.0 / 36.0)
    return SigmaPointSet(dim=n, points=np.array(points), weights=np.array(weights))


#: Jitter ladder for Cholesky of nearly singular covariances: powers of 100
#: starting from 1e-12, preceded by the exact attempt.
_JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8, 1e-6, 1e-4)


def chol_psd(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor of a symmetric PSD matrix, with jitter fallback.

    Returns L with L @ L.T = cov + jitter * I for the smallest jitter on the
    ladder that succeeds. Raises NotPositiveSemidefiniteError when even the
    largest jitter fails.
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    if n == 0:
        return np.zeros((0, 0))
    eye = np.eye(n)
    for jitter in _JITTER_LADDER:
        try:
            return np.linalg.cholesky(cov + jitter * eye if jitter else cov)
        except np.linalg.LinAlgError:
            continue
    raise NotPositiveSemidefiniteError(
        f"matrix not positive semidefinite at jitter {_JITTER_LADDER[-1]:g}",
        jitter=_JITTER_LADDER[-1],
    )


def _eval_points(fn: Callable, chi: np.ndarray, vectorized: bool) -> np.ndarray:
    """Evaluate fn at each row of chi, in ascending point order."""
    if vectorized:
        return np.asarray(fn(chi), dtype=float)
    return np.array([fn(chi[k]) for k in range(chi.shape[0])], dtype=float)


def moment_match(
    mean_fn: Callable,
    cov_fn: Callable,
    belief: GaussianBelief,
    sp: SigmaPointSet,
    *,
    vectorized: bool = False,
) -> GaussianBelief:
    """Gaussian moment matching of x' ~ N(mean_fn(xi), cov_fn(xi)), xi ~ belief.

    mean = sum_n w_n f(chi_n) and
    cov  = sum_n w_n f f^T + sum_n w_n cov_fn(chi_n) - mean mean^T
    with chi_n = mu + L eps_n. The centered form of the quadratic sum is
    used (identical since weights sum to one). The output covariance is
    symmetrized and eigenvalue-clipped if a value below -1e-10 appears.

    With vectorized=True, mean_fn/cov_fn receive the full (N, n) stack of
    sigma locations and must return (N, m) and (N, m, m) arrays.
    """
    chi, _ = sp.locations(belief)
    w = sp.weights
    fvals = _eval_points(mean_fn, chi, vectorized)
    if fvals.ndim != 2 or fvals.shape[0] != sp.count:
        raise ValueError("mean_fn output has wrong shape")
    covs = _eval_points(cov_fn, chi, vectorized)
    if covs.shape != (sp.count, fvals.shape[1], fvals.shape[1]):
        raise ValueError("cov_fn output has wrong shape")
    scale = max(np.max(np.abs(covs)), 1.0)
    if np.max(np.abs(covs - covs.transpose(0, 2, 1))) > 1e-8 * scale:
        raise ValueError("cov_fn returned an asymmetric matrix")

    mean = w @ fvals
    dev = fvals - mean
    cov = np.einsum("n,ni,nj->ij", w, dev, dev) + np.einsum("n,nij->ij", w, covs)
    cov = 0.5 * (cov + cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals.size and eigvals[0] < -1e-10:
        vals, vecs = np.linalg.eigh(cov)
        cov = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    return GaussianBelief(mean=mean, cov=cov)


def solve_lower_triangular(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve L X = B for lower triangular L."""
    return scipy.linalg.solve_triangular(L, B, lower=True)
