"""Stochastic sigma-point dynamic programming over Gaussian trajectory beliefs.

The backward pass fits a local quadratic model of the state-action value
function by Gaussian-weighted least squares over the propagated trajectory
density (evaluated with the degree-5 cubature rule), computes affine
feedback gains from it, and the forward pass pushes the closed-loop belief
through the dynamics by moment matching. Repeated backward/forward cycles
with a feedforward line search minimize the expected cumulative cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from dualmpc.gaussmath import (
    GaussianBelief,
    SigmaPointSet,
    chol_psd,
    ut5_unit_points,
)


class IllConditionedQError(RuntimeError):
    """Action-block curvature could not be regularized within the ladder."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


class DynamicsModel:
    """Mean and covariance of one transition step as functions of xi = [x; u].

    mean_fn maps (n_xi,) -> (n_x,); cov_fn maps (n_xi,) -> (n_x, n_x) PSD.
    Batched variants over (P, n_xi) stacks may be supplied for speed and
    default to a loop.
    """

    def __init__(
        self,
        n_x: int,
        n_u: int,
        mean_fn: Callable,
        cov_fn: Callable,
        mean_many: Optional[Callable] = None,
        cov_many: Optional[Callable] = None,
    ):
        self.n_x = n_x
        self.n_u = n_u
        self.mean_fn = mean_fn
        self.cov_fn = cov_fn
        self._mean_many = mean_many
        self._cov_many = cov_many

    @property
    def n_xi(self) -> int:
        return self.n_x + self.n_u

    def mean_many(self, Xi: np.ndarray) -> np.ndarray:
        if self._mean_many is not None:
            return np.asarray(self._mean_many(Xi), dtype=float)
        return np.array([self.mean_fn(xi) for xi in Xi], dtype=float)

    def cov_many(self, Xi: np.ndarray) -> np.ndarray:
        if self._cov_many is not None:
            return np.asarray(self._cov_many(Xi), dtype=float)
        return np.array([self.cov_fn(xi) for xi in Xi], dtype=float)

    @classmethod
    def from_gp(cls, model, n_u: int) -> "DynamicsModel":
        """Learned-model dynamics: per-dimension predictive mean, diagonal noise."""
        n_x = model.n_x

        def mean_many(Xi):
            return model.predict_mean_many(np.atleast_2d(Xi))

        def cov_many(Xi):
            var = model.predict_var_many(np.atleast_2d(Xi))
            out = np.zeros((var.shape[0], n_x, n_x))
            idx = np.arange(n_x)
            out[:, idx, idx] = var
            return out

        return cls(
            n_x,
            n_u,
            mean_fn=lambda xi: mean_many(xi[None, :])[0],
            cov_fn=lambda xi: cov_many(xi[None, :])[0],
            mean_many=mean_many,
            cov_many=cov_many,
        )

    @classmethod
    def from_plant(cls, spec, noise: Optional[np.ndarray] = None) -> "DynamicsModel":
        """True-model dynamics: one RK4 step, constant process noise."""
        Sf = np.asarray(spec.process_noise if noise is None else noise, dtype=float)

        def mean_many(Xi):
            Xi = np.atleast_2d(Xi)
            return spec.step(Xi[:, : spec.n_x], Xi[:, spec.n_x :])

        def cov_many(Xi):
            return np.broadcast_to(Sf, (np.atleast_2d(Xi).shape[0],) + Sf.shape).copy()

        return cls(
            spec.n_x,
            spec.n_u,
            mean_fn=lambda xi: mean_many(xi[None, :])[0],
            cov_fn=lambda xi: Sf.copy(),
            mean_many=mean_many,
            cov_many=cov_many,
        )


@dataclass(frozen=True)
class CostFunctions:
    """Stage and terminal costs with optional batched evaluation.

    stage(xi, k) and terminal(x, k) take the step index k relative to the
    horizon start; batched forms receive (P, dim) stacks.
    """

    stage: Callable[[np.ndarray, int], float]
    terminal: Callable[[np.ndarray, int], float]
    stage_many: Optional[Callable] = None
    terminal_many: Optional[Callable] = None

    def eval_stage(self, Xi: np.ndarray, k: int) -> np.ndarray:
        if self.stage_many is not None:
            return np.asarray(self.stage_many(Xi, k), dtype=float)
        return np.array([self.stage(xi, k) for xi in Xi], dtype=float)

    def eval_terminal(self, X: np.ndarray, k: int) -> np.ndarray:
        if self.terminal_many is not None:
            return np.asarray(self.terminal_many(X, k), dtype=float)
        return np.array([self.terminal(x, k) for x in X], dtype=float)


@dataclass(frozen=True)
class QuadraticValue:
    """Local quadratic value model v0 + vx.dx + dx.vxx.dx/2 about anchor."""

    v0: float
    vx: np.ndarray
    vxx: np.ndarray
    anchor: GaussianBelief


@dataclass(frozen=True)
class QuadraticQ:
    """Local quadratic state-action value model about a joint anchor belief."""

    q0: float
    qx: np.ndarray
    qu: np.ndarray
    qxx: np.ndarray
    quu: np.ndarray
    qux: np.ndarray
    anchor: GaussianBelief


@dataclass(frozen=True)
class PolicyStep:
    kff: np.ndarray
    Kfb: np.ndarray


@dataclass(frozen=True)
class Policy:
    """Per-step affine feedback u = anchor_u + kff + Kfb (x - anchor_x)."""

    steps: tuple
    anchor_x: np.ndarray  # (H, n_x)
    anchor_u: np.ndarray  # (H, n_u)

    def __len__(self) -> int:
        return len(self.steps)

    def action(self, k: int, x: np.ndarray) -> np.ndarray:
        step = self.steps[k]
        return self.anchor_u[k] + step.kff + step.Kfb @ (np.asarray(x) - self.anchor_x[k])

    def scaled(self, alpha: float) -> "Policy":
        return Policy(
            steps=tuple(PolicyStep(alpha * s.kff, s.Kfb) for s in self.steps),
            anchor_x=self.anchor_x,
            anchor_u=self.anchor_u,
        )

    @classmethod
    def zeros(cls, horizon: int, n_x: int, n_u: int) -> "Policy":
        return cls(
            steps=tuple(PolicyStep(np.zeros(n_u), np.zeros((n_u, n_x))) for _ in range(horizon)),
            anchor_x=np.zeros((horizon, n_x)),
            anchor_u=np.zeros((horizon, n_u)),
        )


@dataclass(frozen=True)
class NominalTrajectory:
    """H+1 joint beliefs over xi; the terminal entry zero-pads the action block.

    cache optionally holds per-step sigma-point dynamics evaluations
    (chi, F, Sf) from the pass that produced the trajectory so a following
    pass over the same locations can reuse them.
    """

    beliefs: tuple
    n_x: int
    n_u: int
    cache: tuple = ()

    @property
    def horizon(self) -> int:
        return len(self.beliefs) - 1

    def state_belief(self, k: int) -> GaussianBelief:
        b = self.beliefs[k]
        return GaussianBelief(b.mean[: self.n_x], b.cov[: self.n_x, : self.n_x])

    def mean_actions(self) -> np.ndarray:
        return np.array([b.mean[self.n_x :] for b in self.beliefs[:-1]])


def _pad_terminal(belief_x: GaussianBelief, n_u: int) -> GaussianBelief:
    n_x = belief_x.dim
    mean = np.concatenate([belief_x.mean, np.zeros(n_u)])
    cov = np.zeros((n_x + n_u, n_x + n_u))
    cov[:n_x, :n_x] = belief_x.cov
    return GaussianBelief(mean, cov)


def _joint_belief(
    belief_x: GaussianBelief, u_mean: np.ndarray, Kfb: Optional[np.ndarray]
) -> GaussianBelief:
    """Assemble the joint xi belief for u = u_mean + Kfb (x - mu_x)."""
    n_x = belief_x.dim
    n_u = u_mean.shape[0]
    mean = np.concatenate([belief_x.mean, u_mean])
    cov = np.zeros((n_x + n_u, n_x + n_u))
    cov[:n_x, :n_x] = belief_x.cov
    if Kfb is not None:
        cross = belief_x.cov @ Kfb.T
        cov[:n_x, n_x:] = cross
        cov[n_x:, :n_x] = cross.T
        cov[n_x:, n_x:] = Kfb @ cross
    return GaussianBelief(mean, 0.5 * (cov + cov.T))


def q_eval(
    xi: np.ndarray,
    stage_cost_fn: Callable[[np.ndarray], float],
    next_value: QuadraticValue,
    dyn: DynamicsModel,
) -> float:
    """One-step lookahead value c(xi) + E[V(x')] under the quadratic tail.

    E[V(x')] for x' ~ N(f(xi), Sf(xi)) expands to the trace term plus the
    quadratic form in dmu = f(xi) - anchor mean of the next value model.
    """
    xi = np.asarray(xi, dtype=float)
    f = np.asarray(dyn.mean_fn(xi), dtype=float)
    Sf = np.asarray(dyn.cov_fn(xi), dtype=float)
    if not (np.all(np.isfinite(f)) and np.all(np.isfinite(Sf))):
        raise FloatingPointError("dynamics returned a non-finite value")
    dmu = f - next_value.anchor.mean
    return float(
        stage_cost_fn(xi)
        + 0.5 * np.trace(Sf @ next_value.vxx)
        + next_value.vx @ dmu
        + 0.5 * dmu @ next_value.vxx @ dmu
        + next_value.v0
    )


def _q_eval_many(
    F: np.ndarray, Sf: np.ndarray, stage: np.ndarray, next_value: QuadraticValue
) -> np.ndarray:
    dmu = F - next_value.anchor.mean
    trace_term = 0.5 * np.einsum("pij,ji->p", Sf, next_value.vxx)
    quad = 0.5 * np.einsum("pi,ij,pj->p", dmu, next_value.vxx, dmu)
    return stage + trace_term + dmu @ next_value.vx + quad + next_value.v0


def _fh_coefficients(
    values: np.ndarray, sp: SigmaPointSet, L: np.ndarray, cov_int: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Quadratic model from sigma-point values over N(mu, L L^T)."""
    w = sp.weights
    pts = sp.points
    mean_val = float(w @ values)
    g_tilde = (w * values) @ pts
    h_tilde = np.einsum("n,ni,nj->ij", w * values, pts, pts) - mean_val * np.eye(sp.dim)
    solve_lt = lambda B: scipy.linalg.solve_triangular(L, B, lower=True, trans="T")
    grad = solve_lt(g_tilde)
    hess = solve_lt(solve_lt(h_tilde).T).T
    hess = 0.5 * (hess + hess.T)
    const = mean_val - 0.5 * np.trace(hess @ cov_int)
    return const, grad, hess


def _floored_factor(belief: GaussianBelief, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky of the belief covariance inflated relative to its own scale.

    floor is a fraction of the largest diagonal entry (plus a 1e-12
    absolute safety term). Keeping all directions of the integration region
    within a bounded ratio of each other matters: the degree-5 rule is
    inexact on degree-6 cross moments, and that error enters the recovered
    Hessian amplified by the squared ratio of block scales. A belief whose
    action block is exactly singular (no gains yet) would otherwise produce
    garbage action curvature. Quadratics are recovered exactly for any
    inflation.
    """
    if floor and belief.dim:
        lift = floor * max(float(np.max(np.diag(belief.cov))), 0.0) + 1e-12
        cov = belief.cov + lift * np.eye(belief.dim)
    else:
        cov = belief.cov
    return chol_psd(cov), cov


def fh_quadratize(
    eval_fn: Callable,
    belief: GaussianBelief,
    sp: SigmaPointSet,
    n_u: int,
    *,
    vectorized: bool = False,
    quad_floor: float = 0.0,
    values: Optional[np.ndarray] = None,
    chol: Optional[np.ndarray] = None,
) -> QuadraticQ:
    """Gaussian-weighted least-squares quadratic model of eval_fn at a belief.

    Evaluates at mu + L eps_n, forms the weighted Hermite coefficients and
    maps them back through L^-T. Exact on quadratics regardless of the
    belief covariance. Precomputed values/chol may be passed to reuse
    evaluations from an earlier pass over the same locations.
    """
    if chol is None:
        L, cov_int = _floored_factor(belief, quad_floor)
    else:
        L = chol
        cov_int = L @ L.T
    if values is None:
        chi = belief.mean + sp.points @ L.T
        if vectorized:
            values = np.asarray(eval_fn(chi), dtype=float)
        else:
            values = np.array([eval_fn(chi[i]) for i in range(sp.count)], dtype=float)
    q0, grad, hess = _fh_coefficients(values, sp, L, cov_int)
    n_x = belief.dim - n_u
    return QuadraticQ(
        q0=q0,
        qx=grad[:n_x],
        qu=grad[n_x:],
        qxx=hess[:n_x, :n_x],
        quu=hess[n_x:, n_x:],
        qux=hess[n_x:, :n_x],
        anchor=belief,
    )


def terminal_value(
    c_H_fn: Callable,
    belief_x: GaussianBelief,
    sp_x: SigmaPointSet,
    *,
    vectorized: bool = False,
    quad_floor: float = 0.0,
) -> QuadraticValue:
    """Quadratic model of the terminal cost over the terminal state belief."""
    L, cov_int = _floored_factor(belief_x, quad_floor)
    chi = belief_x.mean + sp_x.points @ L.T
    if vectorized:
        values = np.asarray(c_H_fn(chi), dtype=float)
    else:
        values = np.array([c_H_fn(chi[i]) for i in range(sp_x.count)], dtype=float)
    v0, vx, vxx = _fh_coefficients(values, sp_x, L, cov_int)
    return QuadraticValue(v0=v0, vx=vx, vxx=vxx, anchor=belief_x)


#: Regularization may not exceed this before the step is declared ill-posed.
_REG_CAP = 1e6
#: Minimum eigenvalue the regularized action curvature must reach.
_REG_MIN_EIG = 1e-9


def gains(q: QuadraticQ, reg: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Feedforward and feedback gains from the quadratic model.

    The action curvature is lifted by lambda * I, escalating tenfold from
    reg (from 1e-9 when reg is zero and the raw curvature is insufficient)
    until its smallest eigenvalue reaches 1e-9 or the 1e6 cap is exhausted.
    """
    n_u = q.qu.shape[0]
    lam = reg
    while True:
        quu_reg = q.quu + lam * np.eye(n_u)
        if np.min(np.linalg.eigvalsh(quu_reg)) >= _REG_MIN_EIG:
            break
        lam = max(lam * 10.0, _REG_MIN_EIG)
        if lam > _REG_CAP:
            raise IllConditionedQError(f"action curvature not positive definite at reg {lam:g}")
    kff = -np.linalg.solve(quu_reg, q.qu)
    Kfb = -np.linalg.solve(quu_reg, q.qux)
    return kff, Kfb, quu_reg


def value_update(q: QuadraticQ, kff: np.ndarray, Kfb: np.ndarray) -> QuadraticValue:
    """Cost-to-go model after substituting the affine action update."""
    vx = q.qx - Kfb.T @ q.quu @ kff
    vxx = q.qxx - Kfb.T @ q.quu @ Kfb
    n_x = q.qx.shape[0]
    anchor = GaussianBelief(q.anchor.mean[:n_x], q.anchor.cov[:n_x, :n_x])
    return QuadraticValue(v0=q.q0, vx=vx, vxx=0.5 * (vxx + vxx.T), anchor=anchor)


def backward_pass(
    nominal: NominalTrajectory,
    dyn: DynamicsModel,
    cost_fns: CostFunctions,
    sp_xi: Optional[SigmaPointSet] = None,
    sp_x: Optional[SigmaPointSet] = None,
    *,
    reg: float = 0.0,
    quad_floor: float = 0.1,
) -> Policy:
    """Sweep the quadratized one-step lookahead from the terminal step to 0.

    Returns the affine policy anchored at the nominal means. Raises
    IllConditionedQError tagged with the offending step.
    """
    n_x, n_u = nominal.n_x, nominal.n_u
    H = nominal.horizon
    if sp_xi is None:
        sp_xi = ut5_unit_points(n_x + n_u)
    if sp_x is None:
        sp_x = ut5_unit_points(n_x)
    value = terminal_value(
        lambda X: cost_fns.eval_terminal(np.atleast_2d(X), H),
        nominal.state_belief(H),
        sp_x,
        vectorized=True,
        quad_floor=quad_floor,
    )
    steps: list[Optional[PolicyStep]] = [None] * H
    anchor_x = np.zeros((H, n_x))
    anchor_u = np.zeros((H, n_u))
    for k in range(H - 1, -1, -1):
        belief = nominal.beliefs[k]
        L, cov_int = _floored_factor(belief, quad_floor)
        chi = belief.mean + sp_xi.points @ L.T
        cached = nominal.cache[k] if k < len(nominal.cache) else None
        if cached is not None and cached["chi"].shape == chi.shape and np.array_equal(cached["chi"], chi):
            F, Sf = cached["F"], cached["Sf"]
        else:
            F = dyn.mean_many(chi)
            Sf = dyn.cov_many(chi)
        if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Sf))):
            raise FloatingPointError(f"dynamics returned non-finite values at step {k}")
        qvals = _q_eval_many(F, Sf, cost_fns.eval_stage(chi, k), value)
        q = fh_quadratize(
            None, belief, sp_xi, n_u, values=qvals, chol=L
        )
        try:
            kff, Kfb, _ = gains(q, reg)
        except IllConditionedQError as err:
            raise IllConditionedQError(str(err), step=k) from None
        value = value_update(q, kff, Kfb)
        steps[k] = PolicyStep(kff=kff, Kfb=Kfb)
        anchor_x[k] = belief.mean[:n_x]
        anchor_u[k] = belief.mean[n_x:]
    return Policy(steps=tuple(steps), anchor_x=anchor_x, anchor_u=anchor_u)


def _propagate(
    belief_x: GaussianBelief,
    u_mean: np.ndarray,
    Kfb: Optional[np.ndarray],
    dyn: DynamicsModel,
    sp_xi: SigmaPointSet,
    deterministic: bool,
) -> tuple[GaussianBelief, GaussianBelief, dict]:
    """One closed-loop moment-matching step; returns (joint, next_x, cache).

    Propagation integrates over the exact joint covariance (moment matching
    involves no inverse transforms, so a singular action block is harmless
    beyond the factorization jitter). The cached sigma-point dynamics
    evaluations are reusable by a backward pass run with quad_floor=0.
    """
    joint = _joint_belief(belief_x, u_mean, Kfb)
    if deterministic:
        f = dyn.mean_fn(joint.mean)
        cache = {}
        next_x = GaussianBelief(np.asarray(f, dtype=float), belief_x.cov)
        return joint, next_x, cache
    L = chol_psd(joint.cov)
    chi = joint.mean + sp_xi.points @ L.T
    F = dyn.mean_many(chi)
    Sf = dyn.cov_many(chi)
    if not (np.all(np.isfinite(F)) and np.all(np.isfinite(Sf))):
        raise FloatingPointError("dynamics returned non-finite values")
    w = sp_xi.weights
    mean = w @ F
    dev = F - mean
    cov = np.einsum("n,ni,nj->ij", w, dev, dev) + np.einsum("n,nij->ij", w, Sf)
    cov = 0.5 * (cov + cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    if eigvals[0] < -1e-10:
        vals, vecs = np.linalg.eigh(cov)
        cov = (vecs * np.clip(vals, 0.0, None)) @ vecs.T
        cov = 0.5 * (cov + cov.T)
    cache = {"chi": chi, "F": F, "Sf": Sf}
    return joint, GaussianBelief(mean, cov), cache


def rollout_nominal(
    init: GaussianBelief,
    actions: np.ndarray,
    dyn: DynamicsModel,
    sp_xi: Optional[SigmaPointSet] = None,
    *,
    deterministic: bool = False,
) -> NominalTrajectory:
    """Open-loop moment-matched rollout of a fixed action sequence."""
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    if sp_xi is None:
        sp_xi = ut5_unit_points(dyn.n_xi)
    beliefs = []
    cache = []
    belief_x = init
    for u in actions:
        joint, belief_x, step_cache = _propagate(belief_x, u, None, dyn, sp_xi, deterministic)
        beliefs.append(joint)
        cache.append(step_cache or None)
    beliefs.append(_pad_terminal(belief_x, dyn.n_u))
    return NominalTrajectory(
        beliefs=tuple(beliefs), n_x=dyn.n_x, n_u=dyn.n_u, cache=tuple(cache)
    )


def forward_pass(
    nominal: NominalTrajectory,
    policy: Policy,
    dyn: DynamicsModel,
    init: GaussianBelief,
    sp_xi: Optional[SigmaPointSet] = None,
    *,
    deterministic: bool = False,
) -> NominalTrajectory:
    """Closed-loop uncertainty propagation under the updated affine policy.

    Action means follow u = anchor_u + kff + Kfb (mu_x - anchor_x) with
    anchors from the old nominal; the joint covariance carries the feedback
    cross terms, and the next state belief is the moment-matched pushforward.
    In deterministic mode only means propagate and every covariance is kept
    from the old nominal.
    """
    if len(policy) != nominal.horizon:
        raise ValueError("policy and nominal horizon disagree")
    if sp_xi is None:
        sp_xi = ut5_unit_points(dyn.n_xi)
    beliefs = []
    cache = []
    belief_x = init
    if deterministic:
        belief_x = GaussianBelief(init.mean, nominal.state_belief(0).cov)
    for k in range(nominal.horizon):
        step = policy.steps[k]
        u_mean = policy.anchor_u[k] + step.kff + step.Kfb @ (belief_x.mean - policy.anchor_x[k])
        joint, belief_x, step_cache = _propagate(
            belief_x, u_mean, step.Kfb, dyn, sp_xi, deterministic
        )
        if deterministic:
            joint = GaussianBelief(joint.mean, nominal.beliefs[k].cov)
            belief_x = GaussianBelief(belief_x.mean, nominal.state_belief(k + 1).cov)
        beliefs.append(joint)
        cache.append(step_cache or None)
    terminal = _pad_terminal(belief_x, dyn.n_u)
    beliefs.append(terminal)
    return NominalTrajectory(
        beliefs=tuple(beliefs), n_x=dyn.n_x, n_u=dyn.n_u, cache=tuple(cache)
    )


def stochastic_objective(
    nominal: NominalTrajectory,
    cost_fns: CostFunctions,
    sp_xi: Optional[SigmaPointSet] = None,
    sp_x: Optional[SigmaPointSet] = None,
) -> float:
    """Expected cumulative cost over the trajectory beliefs."""
    if sp_xi is None:
        sp_xi = ut5_unit_points(nominal.n_x + nominal.n_u)
    if sp_x is None:
        sp_x = ut5_unit_points(nominal.n_x)
    total = 0.0
    for k in range(nominal.horizon):
        chi, _ = sp_xi.locations(nominal.beliefs[k])
        total += float(sp_xi.weights @ cost_fns.eval_stage(chi, k))
    term = nominal.state_belief(nominal.horizon)
    chi, _ = sp_x.locations(term)
    total += float(sp_x.weights @ cost_fns.eval_terminal(chi, nominal.horizon))
    return total


@dataclass(frozen=True)
class SolveOptions:
    max_iters: int = 100
    tol: float = 1e-4
    reg0: float = 0.0
    line_search_steps: int = 5
    deterministic_mode: bool = False
    quad_floor: float = 0.1

    def __post_init__(self):
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class SolveResult:
    policy: Policy
    nominal: NominalTrajectory
    history: list  # dicts: iteration, objective, alpha, reg, wall_ms
    converged: bool = False
    stalled: bool = False

    @property
    def objective(self) -> float:
        return self.history[-1]["objective"]


def solve(
    init: GaussianBelief,
    dyn: DynamicsModel,
    cost_fns: CostFunctions,
    opts: SolveOptions = SolveOptions(),
    init_actions: Optional[np.ndarray] = None,
) -> SolveResult:
    """Iterate backward and forward passes until the objective settles.

    The nominal starts from an open-loop rollout of init_actions (zeros by
    default). Each iteration runs a backward pass, then a backtracking line
    search on the feedforward scale, accepting the best improving candidate.
    Three consecutive non-improving iterations (with regularization
    escalation) end the solve with the stalled flag set.
    """
    sp_xi = ut5_unit_points(dyn.n_xi)
    sp_x = ut5_unit_points(dyn.n_x)
    if init_actions is None:
        init_actions = np.zeros((0, dyn.n_u))
    init_actions = np.asarray(init_actions, dtype=float).reshape(-1, dyn.n_u)
    horizon = init_actions.shape[0]
    nominal = rollout_nominal(
        init, init_actions, dyn, sp_xi, deterministic=opts.deterministic_mode
    )
    objective = stochastic_objective(nominal, cost_fns, sp_xi, sp_x)
    history = [{"iteration": 0, "objective": objective, "alpha": np.nan, "reg": opts.reg0, "wall_ms": 0.0}]
    policy = Policy.zeros(horizon, dyn.n_x, dyn.n_u)
    if opts.max_iters == 0 or horizon == 0:
        return SolveResult(policy=policy, nominal=nominal, history=history, converged=False)

    reg = opts.reg0
    stall = 0
    converged = False
    for iteration in range(1, opts.max_iters + 1):
        tic = time.perf_counter()
        improved = False
        settled = False
        reg_try = reg
        # One iteration sweeps the regularization ladder until a line-search
        # candidate improves: large reg shrinks both gains toward zero, so a
        # non-improving iteration means the current nominal is locally tight.
        while reg_try <= _REG_CAP:
            try:
                candidate_policy = backward_pass(
                    nominal, dyn, cost_fns, sp_xi, sp_x, reg=reg_try, quad_floor=opts.quad_floor
                )
            except IllConditionedQError:
                reg_try = max(reg_try * 10.0, 1e-6)
                continue
            best = None
            alpha = 1.0
            for _ in range(max(opts.line_search_steps, 1)):
                scaled = candidate_policy.scaled(alpha)
                trial = forward_pass(
                    nominal, scaled, dyn, init, sp_xi, deterministic=opts.deterministic_mode
                )
                trial_obj = stochastic_objective(trial, cost_fns, sp_xi, sp_x)
                if np.isfinite(trial_obj) and (best is None or trial_obj < best[0]):
                    best = (trial_obj, alpha, scaled, trial)
                alpha *= 0.5
            if best is not None and best[0] < objective:
                improved = True
                break
            if best is not None and abs(best[0] - objective) / max(objective, 1e-9) < opts.tol:
                settled = True
                break
            reg_try = max(reg_try * 10.0, 1e-6)
        wall_ms = (time.perf_counter() - tic) * 1e3
        if improved:
            prev = objective
            objective, accepted_alpha, policy, nominal = best
            stall = 0
            reg = max(reg_try * 0.1, opts.reg0)
            history.append(
                {
                    "iteration": iteration,
                    "objective": objective,
                    "alpha": accepted_alpha,
                    "reg": reg_try,
                    "wall_ms": wall_ms,
                }
            )
            if abs(prev - objective) / max(prev, 1e-9) < opts.tol:
                converged = True
                break
        else:
            history.append(
                {
                    "iteration": iteration,
                    "objective": objective,
                    "alpha": np.nan,
                    "reg": reg_try,
                    "wall_ms": wall_ms,
                }
            )
            if settled:
                # The best candidate reproduces the current objective within
                # tolerance: the backward/forward cycle has settled.
                converged = True
                break
            stall += 1
            reg = max(reg * 10.0, 1e-6)
            if stall >= 3:
                break
    stalled = stall >= 3
    return SolveResult(
        policy=policy, nominal=nominal, history=history, converged=converged, stalled=stalled
    )
