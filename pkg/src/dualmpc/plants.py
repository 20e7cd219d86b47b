"""Ground-truth simulated systems and continuous-to-discrete integration.

Derivative functions broadcast over leading batch axes so that sigma-point
stacks can be pushed through the true dynamics in one call. Discretization
is classical RK4 with the action held constant across the step; process
noise is added after integration from a seeded generator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class DivergenceError(RuntimeError):
    """State became non-finite during integration."""


PENDULUM_DEFAULTS = {"m": 1.0, "l": 1.0, "g": 9.81, "b": 0.1}

VEHICLE_DEFAULTS = {
    "m": 1500.0,
    "Iz": 2500.0,
    "lf": 1.2,
    "lr": 1.4,
    "Cf": 8.0e4,
    "Cr": 8.0e4,
    "Fmax": 5.0e3,
    "vx_floor": 0.1,
}


def pendulum_deriv(x: np.ndarray, u: np.ndarray, params: Optional[dict] = None) -> np.ndarray:
    """Damped pendulum: state (theta, thetadot), torque input."""
    p = {**PENDULUM_DEFAULTS, **(params or {})}
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    theta = x[..., 0]
    omega = x[..., 1]
    torque = u[..., 0]
    acc = (torque - p["b"] * omega - p["m"] * p["g"] * p["l"] * np.sin(theta)) / (
        p["m"] * p["l"] ** 2
    )
    return np.stack([omega, acc], axis=-1)


def scalar_toy_deriv(x: np.ndarray, u: np.ndarray, params: Optional[dict] = None) -> np.ndarray:
    """One-dimensional benchmark drift with additive control."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    s = x[..., 0]
    f = (
        np.tanh(1.0 + 0.05 * s - 0.5 * s**2)
        + 0.6 * np.sin(4.0 * s)
        + 0.3 * np.sin(10.0 * s + 0.5) * np.exp(-0.05 * s)
        - 0.14
    )
    return (f + u[..., 0])[..., None]


def vehicle6dof_deriv(
    x: np.ndarray,
    u: np.ndarray,
    params: Optional[dict] = None,
    diag: Optional[dict] = None,
) -> np.ndarray:
    """Planar 6-DoF vehicle with linear tires.

    State (X, Y, psi, vx, vy, omega); inputs (steer delta, normalized front
    longitudinal force). vx is clamped to a validity floor inside the slip
    angle formulas only; occurrences are counted in diag['vx_clamped'] when
    a diag dict is supplied.
    """
    p = {**VEHICLE_DEFAULTS, **(params or {})}
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    psi = x[..., 2]
    vx = x[..., 3]
    vy = x[..., 4]
    omega = x[..., 5]
    delta = u[..., 0]
    fxf_norm = u[..., 1]

    vx_safe = np.maximum(vx, p["vx_floor"])
    if diag is not None:
        diag["vx_clamped"] = diag.get("vx_clamped", 0) + int(np.sum(vx < p["vx_floor"]))
    alpha_f = np.arctan((vy + p["lf"] * omega) / vx_safe) - delta
    alpha_r = np.arctan((vy - p["lr"] * omega) / vx_safe)
    Fyf = -p["Cf"] * alpha_f
    Fyr = -p["Cr"] * alpha_r
    Fxf = fxf_norm * p["Fmax"]

    cos_d = np.cos(delta)
    sin_d = np.sin(delta)
    dX = vx * np.cos(psi) - vy * np.sin(psi)
    dY = vx * np.sin(psi) + vy * np.cos(psi)
    dpsi = omega
    dvx = (Fxf * cos_d - Fyf * sin_d) / p["m"] + vy * omega
    dvy = (Fxf * sin_d + Fyf * cos_d + Fyr) / p["m"] - vx * omega
    domega = (p["lf"] * (Fxf * sin_d + Fyf * cos_d) - p["lr"] * Fyr) / p["Iz"]
    return np.stack([dX, dY, dpsi, dvx, dvy, domega], axis=-1)


_DERIVS: dict[str, Callable] = {
    "pendulum": pendulum_deriv,
    "scalar_toy": scalar_toy_deriv,
    "vehicle6dof": vehicle6dof_deriv,
}


@dataclass(frozen=True)
class PlantSpec:
    """Simulated system description: dimensions, step time, parameters, noise."""

    name: str
    n_x: int
    n_u: int
    dt: float
    params: dict = field(default_factory=dict)
    process_noise: np.ndarray = None
    action_bounds: Optional[np.ndarray] = None  # (n_u, 2) rows of [lo, hi]

    def __post_init__(self):
        if self.name not in _DERIVS:
            raise ValueError(f"unknown plant {self.name!r}")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        noise = self.process_noise
        if noise is None:
            noise = np.zeros((self.n_x, self.n_x))
        noise = np.asarray(noise, dtype=float)
        if noise.ndim == 1:
            noise = np.diag(noise)
        object.__setattr__(self, "process_noise", noise)
        if np.min(np.linalg.eigvalsh(0.5 * (noise + noise.T))) < -1e-12:
            raise ValueError("process noise must be PSD")
        if self.action_bounds is not None:
            object.__setattr__(self, "action_bounds", np.asarray(self.action_bounds, dtype=float))

    @property
    def deriv(self) -> Callable:
        return _DERIVS[self.name]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """One noiseless RK4 step; broadcasts over leading axes."""
        return rk4_step(lambda xx, uu: self.deriv(xx, uu, self.params), x, u, self.dt)


def pendulum_spec(dt: float = 0.1, noise: float = 1e-4, **params) -> PlantSpec:
    return PlantSpec(
        "pendulum", 2, 1, dt, {**PENDULUM_DEFAULTS, **params}, noise * np.eye(2)
    )


def scalar_toy_spec(dt: float = 0.1, noise: float = 1e-3, **params) -> PlantSpec:
    return PlantSpec("scalar_toy", 1, 1, dt, dict(params), noise * np.eye(1))


def vehicle_spec(dt: float = 0.1, noise: float = 1e-4, **params) -> PlantSpec:
    return PlantSpec(
        "vehicle6dof", 6, 2, dt, {**VEHICLE_DEFAULTS, **params}, noise * np.eye(6)
    )


def rk4_step(deriv_fn: Callable, x: np.ndarray, u: np.ndarray, dt: float) -> np.ndarray:
    """Classical fourth-order Runge-Kutta step with u held constant."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    k1 = deriv_fn(x, u)
    k2 = deriv_fn(x + 0.5 * dt * k1, u)
    k3 = deriv_fn(x + 0.5 * dt * k2, u)
    k4 = deriv_fn(x + dt * k3, u)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite state after integration step")
    return out


def simulate(
    spec: PlantSpec,
    x0: np.ndarray,
    actions: np.ndarray,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Roll the plant forward under an action sequence with process noise.

    Returns the (T+1, n_x) state trajectory. Noise draws come from the
    seeded generator (or a caller-owned rng), so runs repeat bit-exactly.
    """
    actions = np.atleast_2d(np.asarray(actions, dtype=float)).reshape(-1, spec.n_u)
    if rng is None:
        rng = np.random.default_rng(seed)
    noisy = np.any(spec.process_noise)
    chol = np.linalg.cholesky(spec.process_noise + 1e-300 * np.eye(spec.n_x)) if noisy else None
    traj = np.zeros((actions.shape[0] + 1, spec.n_x))
    traj[0] = np.asarray(x0, dtype=float)
    for t, u in enumerate(actions):
        nxt = spec.step(traj[t], u)
        if noisy:
            nxt = nxt + chol @ rng.standard_normal(spec.n_x)
        if not np.all(np.isfinite(nxt)):
            raise DivergenceError(f"divergence at step {t}")
        traj[t + 1] = nxt
    return traj
