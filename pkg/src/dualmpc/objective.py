"""Task cost and information-gain exploration cost.

Assembles the per-stage cost fed to the trajectory optimizer: a quadratic
tracking/effort term plus a weighted exploration bonus derived from the
predicted information gain of the learned model. The exploration term is
non-positive and bounded below, so adding a cached offset keeps the total
stage cost non-negative.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from dualmpc import sgp
from dualmpc.sgp import ModelGP


@dataclass(frozen=True)
class QuadraticCostSpec:
    """Quadratic stage and terminal cost weights with a time-indexed reference.

    reference maps an absolute step index k to the desired state x_ref_k.
    """

    W: np.ndarray
    R: np.ndarray
    W_H: np.ndarray
    reference: Callable[[int], np.ndarray]

    def __post_init__(self):
        for name in ("W", "R", "W_H"):
            mat = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, 0.5 * (mat + mat.T))
        if np.min(np.linalg.eigvalsh(self.R)) <= 0:
            raise ValueError("R must be positive definite")
        for name in ("W", "W_H"):
            if np.min(np.linalg.eigvalsh(getattr(self, name))) < -1e-10:
                raise ValueError(f"{name} must be positive semidefinite")

    @property
    def n_x(self) -> int:
        return self.W.shape[0]

    @property
    def n_u(self) -> int:
        return self.R.shape[0]


def stage_cost(spec: QuadraticCostSpec, xi: np.ndarray, k: int) -> float:
    """(x - x_ref_k)^T W (x - x_ref_k) + u^T R u for xi = [x; u]."""
    xi = np.asarray(xi, dtype=float)
    dx = xi[: spec.n_x] - spec.reference(k)
    u = xi[spec.n_x :]
    return float(dx @ spec.W @ dx + u @ spec.R @ u)


def terminal_cost(spec: QuadraticCostSpec, x: np.ndarray, k: int) -> float:
    """(x - x_ref_k)^T W_H (x - x_ref_k); no action term."""
    dx = np.asarray(x, dtype=float)[: spec.n_x] - spec.reference(k)
    return float(dx @ spec.W_H @ dx)


def stage_cost_many(spec: QuadraticCostSpec, Xi: np.ndarray, k: int) -> np.ndarray:
    Xi = np.atleast_2d(Xi)
    dx = Xi[:, : spec.n_x] - spec.reference(k)
    u = Xi[:, spec.n_x :]
    return np.einsum("pi,ij,pj->p", dx, spec.W, dx) + np.einsum("pi,ij,pj->p", u, spec.R, u)


def terminal_cost_many(spec: QuadraticCostSpec, X: np.ndarray, k: int) -> np.ndarray:
    dx = np.atleast_2d(X)[:, : spec.n_x] - spec.reference(k)
    return np.einsum("pi,ij,pj->p", dx, spec.W_H, dx)


def exploration_offset(model: ModelGP) -> float:
    """Offset making the exploration cost non-negative after shifting.

    0.5 * sum_i log(1 + bound_i / noise_i) with bound_i the per-dimension
    predictive-variance bound; depends only on hyperparameters and priors.
    """
    total = 0.0
    for sub in model.subsystems:
        total += 0.5 * np.log1p(sgp.variance_bound(sub) / sub.kernel.noise)
    return float(total)


@dataclass(frozen=True)
class ExplorationSpec:
    """Exploration weighting: gamma >= 0, mode in {off, full, parametric}.

    offset is the cached bound-derived constant for the model the spec was
    built against (0.0 when mode is off).
    """

    gamma: float
    mode: str = "full"
    offset: float = 0.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.mode not in ("off", "full", "parametric"):
            raise ValueError(f"unknown exploration mode {self.mode!r}")

    @classmethod
    def off(cls) -> "ExplorationSpec":
        return cls(gamma=0.0, mode="off")

    @classmethod
    def for_model(cls, gamma: float, mode: str, model: ModelGP) -> "ExplorationSpec":
        if mode == "off":
            return cls.off()
        return cls(gamma=gamma, mode=mode, offset=exploration_offset(model))


def exploration_cost(model: ModelGP, xi: np.ndarray, mode: str) -> float:
    """Non-positive information-gain cost at one feature point."""
    return float(exploration_cost_many(model, np.asarray(xi, dtype=float)[None, :], mode)[0])


def exploration_cost_many(model: ModelGP, Xi: np.ndarray, mode: str) -> np.ndarray:
    """-0.5 * sum_i log(1 + latent_var_i / noise_i) over a stack of points.

    In full mode the latent variance is the predictive variance minus the
    observation noise it carries (clipped at zero), so a fully learned
    region scores exactly zero. Parametric mode uses phi^T theta_cov phi.
    """
    if mode == "off":
        raise ValueError("exploration cost must not be evaluated with mode 'off'")
    Xi = np.atleast_2d(Xi)
    total = np.zeros(Xi.shape[0])
    for sub in model.subsystems:
        if mode == "full":
            _, var = sgp.predict_many(sub, Xi)
            latent = np.maximum(var - sub.kernel.noise, 0.0)
            total -= 0.5 * np.log1p(latent / sub.kernel.noise)
        else:  # parametric
            phi = sgp.basis_eval_many(sub.basis, Xi)
            quad = np.einsum("pt,pt->p", phi, phi @ sub.theta_cov) if sub.basis.n_theta else 0.0
            total -= 0.5 * np.log1p(quad)
    return total


def efe_stage_cost(
    spec: QuadraticCostSpec,
    expl: ExplorationSpec,
    model: Optional[ModelGP],
    xi: np.ndarray,
    k: int,
) -> float:
    """Stage cost plus gamma-weighted, offset-shifted exploration cost."""
    return float(efe_stage_cost_many(spec, expl, model, np.asarray(xi)[None, :], k)[0])


def efe_stage_cost_many(
    spec: QuadraticCostSpec,
    expl: ExplorationSpec,
    model: Optional[ModelGP],
    Xi: np.ndarray,
    k: int,
) -> np.ndarray:
    base = stage_cost_many(spec, Xi, k)
    if expl.mode == "off" or expl.gamma == 0.0:
        return base
    bonus = exploration_cost_many(model, Xi, expl.mode)
    return base + expl.gamma * (bonus + expl.offset)
