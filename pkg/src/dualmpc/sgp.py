"""Online sparse semi-parametric Gaussian-process dynamics learner.

Each output dimension of the transition map is learned by an independent
SubsystemGP combining a linearly parameterized mean (theta^T phi) with a
squared-exponential GP on the residual. Fitting keeps the reparameterized
quantities alpha = K^-1 y, beta = K^-1 Phi, C = K^-1 so that new points can
be folded in by rank-one extension and old points dropped by a scored
rank-one downdate, keeping the stored pool at a fixed budget.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import cho_solve

from dualmpc.gaussmath import NotPositiveSemidefiniteError, chol_psd


class FitError(RuntimeError):
    """Gram matrix numerically singular even after the jitter ladder."""


class DegenerateInclusionError(RuntimeError):
    """New point duplicates a stored one; rank-one extension would divide by ~0."""


class InternalStateError(RuntimeError):
    """A stored invariant (e.g. positive C diagonal) is broken."""


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel hyperparameters.

    lengthscales holds the diagonal of the metric matrix W, i.e. the
    squared per-dimension length scales; noise is the observation variance
    added on Gram diagonals.
    """

    amplitude: float
    lengthscales: np.ndarray
    noise: float

    def __post_init__(self):
        object.__setattr__(self, "lengthscales", np.asarray(self.lengthscales, dtype=float))
        if self.amplitude <= 0 or self.noise <= 0 or np.any(self.lengthscales <= 0):
            raise ValueError("kernel hyperparameters must be positive")

    @property
    def n_xi(self) -> int:
        return self.lengthscales.shape[0]


@dataclass(frozen=True)
class BasisSpec:
    """Feature transformation for the parametric model component.

    Variants and unit counts:
      none        -> 0
      linear      -> n_xi + 1      tanh([1, xi])
      polynomial  -> d*n_xi + 1    tanh([1, xi, xi^2, ..., xi^d])
      fourier     -> 2d + 1        [1, sin(w_j xibar), cos(w_j xibar)],
                                   xibar a shared unit projection of xi
      rbf         -> d + 1         [1, exp(-||xi - c_j||^2 / l_j)]
    All variants are bounded with ||phi||_2 <= sqrt(n_theta).
    """

    variant: str
    n_xi: int
    degree: int = 0
    frequencies: Optional[np.ndarray] = None
    projection: Optional[np.ndarray] = None
    centers: Optional[np.ndarray] = None
    lengths: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.variant not in ("none", "linear", "polynomial", "fourier", "rbf"):
            raise ValueError(f"unknown basis variant {self.variant!r}")
        for name in ("frequencies", "projection", "centers", "lengths"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        if self.variant == "polynomial" and self.degree < 1:
            raise ValueError("polynomial basis needs degree >= 1")
        if self.variant == "fourier":
            if self.frequencies is None or self.projection is None:
                raise ValueError("fourier basis needs frequencies and projection")
            if self.projection.shape != (self.n_xi,):
                raise ValueError("fourier projection must have length n_xi")
        if self.variant == "rbf":
            if self.centers is None or self.lengths is None:
                raise ValueError("rbf basis needs centers and lengths")
            if self.centers.shape != (self.lengths.shape[0], self.n_xi):
                raise ValueError("rbf centers must be (d, n_xi)")
            if np.any(self.lengths <= 0):
                raise ValueError("rbf lengths must be positive")

    @classmethod
    def none(cls, n_xi: int) -> "BasisSpec":
        return cls("none", n_xi)

    @classmethod
    def linear(cls, n_xi: int) -> "BasisSpec":
        return cls("linear", n_xi)

    @classmethod
    def polynomial(cls, n_xi: int, degree: int) -> "BasisSpec":
        return cls("polynomial", n_xi, degree=degree)

    @classmethod
    def fourier(cls, frequencies: Sequence[float], projection: Sequence[float]) -> "BasisSpec":
        projection = np.asarray(projection, dtype=float)
        return cls(
            "fourier",
            projection.shape[0],
            degree=len(frequencies),
            frequencies=np.asarray(frequencies, dtype=float),
            projection=projection,
        )

    @classmethod
    def rbf(cls, centers: np.ndarray, lengths: Sequence[float]) -> "BasisSpec":
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        return cls(
            "rbf",
            centers.shape[1],
            degree=centers.shape[0],
            centers=centers,
            lengths=np.asarray(lengths, dtype=float),
        )

    @property
    def n_theta(self) -> int:
        if self.variant == "none":
            return 0
        if self.variant == "linear":
            return self.n_xi + 1
        if self.variant == "polynomial":
            return self.degree * self.n_xi + 1
        if self.variant == "fourier":
            return 2 * self.degree + 1
        return self.degree + 1  # rbf

    @property
    def phi_bound(self) -> float:
        """Analytic bound on ||phi(xi)||_2: every component lies in [-1, 1]."""
        return 0.0 if self.variant == "none" else float(np.sqrt(self.n_theta))


def kernel_eval(a: np.ndarray, b: np.ndarray, p: KernelParams, same_index: bool) -> float:
    """Squared-exponential covariance between two feature vectors.

    same_index marks that a and b denote the identical stored data entry,
    adding the observation noise; it is never set for cross-covariances.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.shape != (p.n_xi,):
        raise ValueError("feature dimension mismatch")
    d2 = np.sum((a - b) ** 2 / p.lengthscales)
    val = p.amplitude * np.exp(-0.5 * d2)
    return float(val + p.noise) if same_index else float(val)


def kernel_cross(X: np.ndarray, Z: np.ndarray, p: KernelParams) -> np.ndarray:
    """Noise-free kernel matrix between row stacks X (P, n) and Z (Q, n)."""
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    diff = X[:, None, :] - Z[None, :, :]
    d2 = np.sum(diff * diff / p.lengthscales, axis=2)
    return p.amplitude * np.exp(-0.5 * d2)


def kernel_gram(X: np.ndarray, p: KernelParams) -> np.ndarray:
    """Gram matrix of stored entries: cross matrix plus noise on the diagonal."""
    K = kernel_cross(X, X, p)
    return K + p.noise * np.eye(K.shape[0])


def basis_eval(spec: BasisSpec, xi: np.ndarray) -> np.ndarray:
    """Evaluate the basis at one feature vector, returning (n_theta,)."""
    return basis_eval_many(spec, np.asarray(xi, dtype=float)[None, :])[0]


def basis_eval_many(spec: BasisSpec, Xi: np.ndarray) -> np.ndarray:
    """Evaluate the basis at a (P, n_xi) stack, returning (P, n_theta)."""
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    P = Xi.shape[0]
    if Xi.shape[1] != spec.n_xi:
        raise ValueError(f"feature dimension {Xi.shape[1]} != {spec.n_xi}")
    if spec.variant == "none":
        return np.zeros((P, 0))
    if spec.variant == "linear":
        return np.tanh(np.hstack([np.ones((P, 1)), Xi]))
    if spec.variant == "polynomial":
        cols = [np.ones((P, 1))]
        cols.extend(Xi**k for k in range(1, spec.degree + 1))
        return np.tanh(np.hstack(cols))
    if spec.variant == "fourier":
        v = spec.projection / np.linalg.norm(spec.projection)
        xb = Xi @ v
        cols = [np.ones(P)]
        for w in spec.frequencies:
            cols.append(np.sin(w * xb))
            cols.append(np.cos(w * xb))
        return np.column_stack(cols)
    # rbf
    diff = Xi[:, None, :] - spec.centers[None, :, :]
    d2 = np.sum(diff * diff, axis=2)
    return np.hstack([np.ones((P, 1)), np.exp(-d2 / spec.lengths)])


@dataclass(frozen=True)
class SubsystemGP:
    """Learner state for one output dimension.

    features/labels are the stored data pool; alpha, beta, cmat the
    reparameterized solve products on that pool; theta_mean/theta_cov the
    parametric posterior, which keeps information from every observed point
    even after pool deletions.
    """

    features: np.ndarray  # (P, n_xi)
    labels: np.ndarray  # (P,)
    alpha: np.ndarray  # (P,)
    beta: np.ndarray  # (P, n_theta)
    cmat: np.ndarray  # (P, P)
    theta_mean: np.ndarray  # (n_theta,)
    theta_cov: np.ndarray  # (n_theta, n_theta)
    theta_mean_prior: np.ndarray
    theta_cov_prior: np.ndarray
    kernel: KernelParams
    basis: BasisSpec
    budget: int

    @property
    def pool_size(self) -> int:
        return self.features.shape[0]


def _solve_gram(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cholesky of the Gram matrix with the shared jitter ladder."""
    try:
        L = chol_psd(K)
    except NotPositiveSemidefiniteError as err:
        raise FitError(f"gram matrix singular (jitter up to {err.jitter:g})") from err
    return L, cho_solve((L, True), np.eye(K.shape[0]))


def batch_fit(
    features: np.ndarray,
    labels: np.ndarray,
    kernel: KernelParams,
    basis: BasisSpec,
    theta_mean_prior: np.ndarray,
    theta_cov_prior: np.ndarray,
    budget: Optional[int] = None,
) -> SubsystemGP:
    """Fit a SubsystemGP from scratch on the given pool.

    Computes alpha = K^-1 y, beta = K^-1 Phi, C = K^-1 and the parametric
    posterior from the prior and the pool. Empty input returns the priors
    with an empty pool.
    """
    features = np.asarray(features, dtype=float).reshape(-1, kernel.n_xi)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    if features.shape[0] != labels.shape[0]:
        raise ValueError("features and labels disagree in length")
    n_theta = basis.n_theta
    mu0 = np.asarray(theta_mean_prior, dtype=float).reshape(n_theta)
    S0 = np.asarray(theta_cov_prior, dtype=float).reshape(n_theta, n_theta)
    P = features.shape[0]
    if budget is None:
        budget = max(P, 1)

    if P == 0:
        return SubsystemGP(
            features=np.zeros((0, kernel.n_xi)),
            labels=np.zeros(0),
            alpha=np.zeros(0),
            beta=np.zeros((0, n_theta)),
            cmat=np.zeros((0, 0)),
            theta_mean=mu0.copy(),
            theta_cov=S0.copy(),
            theta_mean_prior=mu0,
            theta_cov_prior=S0,
            kernel=kernel,
            basis=basis,
            budget=budget,
        )

    K = kernel_gram(features, kernel)
    L, C = _solve_gram(K)
    alpha = cho_solve((L, True), labels)
    Phi = basis_eval_many(basis, features)  # (P, n_theta)
    beta = cho_solve((L, True), Phi) if n_theta else np.zeros((P, 0))
    if n_theta:
        S0_inv = np.linalg.inv(S0)
        M = Phi.T @ beta + S0_inv
        theta_cov = np.linalg.inv(M)
        theta_cov = 0.5 * (theta_cov + theta_cov.T)
        theta_mean = theta_cov @ (Phi.T @ alpha + S0_inv @ mu0)
    else:
        theta_mean = mu0.copy()
        theta_cov = S0.copy()
    return SubsystemGP(
        features=features.copy(),
        labels=labels.copy(),
        alpha=alpha,
        beta=beta,
        cmat=0.5 * (C + C.T),
        theta_mean=theta_mean,
        theta_cov=theta_cov,
        theta_mean_prior=mu0,
        theta_cov_prior=S0,
        kernel=kernel,
        basis=basis,
        budget=budget,
    )


#: Predictive variance never reported below this fraction of the noise level.
VAR_FLOOR_FRACTION = 1e-3


def predict(sub: SubsystemGP, xi: np.ndarray) -> tuple[float, float]:
    """Predictive mean and variance at one query point."""
    means, variances = predict_many(sub, np.asarray(xi, dtype=float)[None, :])
    return float(means[0]), float(variances[0])


def predict_many(sub: SubsystemGP, Xi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance at a (Q, n_xi) stack of query points.

    mean = phi^T theta_mean + (alpha - beta theta_mean)^T K*
    var  = R^T theta_cov R + K** - K*^T C K*,  R = beta^T K* - phi
    with K** carrying the noise term once, so var is the full predictive
    variance of the next observation. var is floored at a small fraction of
    the noise level.
    """
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    Phi_q = basis_eval_many(sub.basis, Xi)  # (Q, n_theta)
    kss = sub.kernel.amplitude + sub.kernel.noise
    means = Phi_q @ sub.theta_mean
    if sub.pool_size:
        Ks = kernel_cross(sub.features, Xi, sub.kernel)  # (P, Q)
        resid = sub.alpha - sub.beta @ sub.theta_mean  # (P,)
        means = means + Ks.T @ resid
        R = sub.beta.T @ Ks - Phi_q.T  # (n_theta, Q)
        variances = kss - np.einsum("pq,pq->q", Ks, sub.cmat @ Ks)
    else:
        R = -Phi_q.T
        variances = np.full(Xi.shape[0], kss)
    if sub.basis.n_theta:
        variances = variances + np.einsum("tq,tq->q", R, sub.theta_cov @ R)
    return means, np.maximum(variances, sub.kernel.noise * VAR_FLOOR_FRACTION)


def include(sub: SubsystemGP, xi: np.ndarray, y: float) -> SubsystemGP:
    """Fold one observation into the pool by rank-one extension.

    Extends alpha, beta, C for the grown pool and contracts the parametric
    posterior. Raises DegenerateInclusionError when the new point is a
    numerical duplicate of a stored one (extension denominator <= 1e-12);
    callers should skip the inclusion in that case.
    """
    xi = np.asarray(xi, dtype=float).reshape(sub.kernel.n_xi)
    y = float(y)
    P = sub.pool_size
    kss = sub.kernel.amplitude + sub.kernel.noise
    if P:
        Ks = kernel_cross(sub.features, xi[None, :], sub.kernel)[:, 0]  # (P,)
        CKs = sub.cmat @ Ks
        denom = kss - Ks @ CKs
    else:
        Ks = np.zeros(0)
        CKs = np.zeros(0)
        denom = kss
    if denom <= 1e-12:
        raise DegenerateInclusionError(f"extension denominator {denom:.3e} <= 1e-12")

    phi = basis_eval(sub.basis, xi)
    R = sub.beta.T @ Ks - phi  # (n_theta,)
    mean_t = phi @ sub.theta_mean + (sub.alpha - sub.beta @ sub.theta_mean) @ Ks
    var_t = denom + (R @ sub.theta_cov @ R if sub.basis.n_theta else 0.0)

    b = 1.0 / denom
    a = b * (sub.alpha @ Ks - y)
    S = np.append(CKs, -1.0)

    alpha_new = np.append(sub.alpha, 0.0) + a * S
    beta_new = np.vstack([sub.beta, np.zeros((1, sub.basis.n_theta))]) + b * np.outer(S, R)
    cmat_new = np.zeros((P + 1, P + 1))
    cmat_new[:P, :P] = sub.cmat
    cmat_new += b * np.outer(S, S)
    cmat_new = 0.5 * (cmat_new + cmat_new.T)

    if sub.basis.n_theta:
        lam = (sub.theta_cov @ R) / var_t
        theta_mean_new = sub.theta_mean + lam * (mean_t - y)
        theta_cov_new = sub.theta_cov - np.outer(lam, R @ sub.theta_cov)
        theta_cov_new = 0.5 * (theta_cov_new + theta_cov_new.T)
    else:
        theta_mean_new = sub.theta_mean
        theta_cov_new = sub.theta_cov

    return replace(
        sub,
        features=np.vstack([sub.features, xi[None, :]]),
        labels=np.append(sub.labels, y),
        alpha=alpha_new,
        beta=beta_new,
        cmat=cmat_new,
        theta_mean=theta_mean_new,
        theta_cov=theta_cov_new,
    )


def elimination_scores(sub: SubsystemGP) -> np.ndarray:
    """Per-point deletion scores |alpha - beta theta_mean|_j / C_jj."""
    if sub.pool_size == 0:
        raise ValueError("empty pool has no elimination scores")
    diag = np.diag(sub.cmat)
    if np.any(diag <= 0):
        raise InternalStateError("C diagonal must be positive")
    resid = np.abs(sub.alpha - sub.beta @ sub.theta_mean)
    return resid / diag


def remove(sub: SubsystemGP, m: int) -> SubsystemGP:
    """Drop pool entry m (0-based) by rank-one downdate of alpha, beta, C.

    The parametric posterior is intentionally untouched: it retains the
    information the deleted point contributed.
    """
    P = sub.pool_size
    if not 0 <= m < P:
        raise IndexError(f"pool index {m} out of range for size {P}")
    c_mm = sub.cmat[m, m]
    if c_mm <= 0:
        raise InternalStateError("C diagonal must be positive")
    keep = np.arange(P) != m
    c_col = sub.cmat[keep, m]
    alpha_new = sub.alpha[keep] - c_col * (sub.alpha[m] / c_mm)
    beta_new = sub.beta[keep] - np.outer(c_col, sub.beta[m]) / c_mm
    cmat_new = sub.cmat[np.ix_(keep, keep)] - np.outer(c_col, c_col) / c_mm
    cmat_new = 0.5 * (cmat_new + cmat_new.T)
    return replace(
        sub,
        features=sub.features[keep],
        labels=sub.labels[keep],
        alpha=alpha_new,
        beta=beta_new,
        cmat=cmat_new,
    )


def variance_bound(sub: SubsystemGP) -> float:
    """Input-independent upper bound on the predictive variance.

    amplitude + noise + lambda_max(prior theta cov) * phi_bound^2; holds for
    every query because conditioning only shrinks each term.
    """
    bound = sub.kernel.amplitude + sub.kernel.noise
    if sub.basis.n_theta:
        lam_max = float(np.max(np.linalg.eigvalsh(sub.theta_cov_prior)))
        bound += lam_max * sub.basis.phi_bound**2
    return float(bound)


@dataclass(frozen=True)
class ModelGP:
    """Per-output-dimension learners sharing the same feature space."""

    subsystems: tuple[SubsystemGP, ...]

    def __post_init__(self):
        object.__setattr__(self, "subsystems", tuple(self.subsystems))
        dims = {sub.kernel.n_xi for sub in self.subsystems}
        if len(dims) > 1:
            raise ValueError("subsystems disagree on feature dimension")

    @property
    def n_x(self) -> int:
        return len(self.subsystems)

    @property
    def n_xi(self) -> int:
        return self.subsystems[0].kernel.n_xi

    def predict_mean_many(self, Xi: np.ndarray) -> np.ndarray:
        """Stacked predictive means, shape (Q, n_x)."""
        return np.column_stack([predict_many(sub, Xi)[0] for sub in self.subsystems])

    def predict_var_many(self, Xi: np.ndarray) -> np.ndarray:
        """Stacked predictive variances, shape (Q, n_x)."""
        return np.column_stack([predict_many(sub, Xi)[1] for sub in self.subsystems])


def gp_update(model: ModelGP, xi: np.ndarray, x_next: np.ndarray) -> ModelGP:
    """Fold the observed transition into every subsystem and enforce budgets.

    Includes (xi, x_next[i]) per dimension; if the pool then exceeds its
    budget, the entry with the lowest elimination score is dropped (ties to
    the smallest index). A degenerate inclusion leaves that dimension
    unchanged.
    """
    x_next = np.asarray(x_next, dtype=float).reshape(model.n_x)
    updated = []
    for sub, y in zip(model.subsystems, x_next):
        try:
            grown = include(sub, xi, y)
        except DegenerateInclusionError:
            updated.append(sub)
            continue
        if grown.pool_size > grown.budget:
            grown = remove(grown, int(np.argmin(elimination_scores(grown))))
        updated.append(grown)
    return ModelGP(subsystems=tuple(updated))


def marginal_nll(
    features: np.ndarray,
    labels: np.ndarray,
    kernel: KernelParams,
    basis: BasisSpec,
    theta_mean_prior: np.ndarray,
    theta_cov_prior: np.ndarray,
) -> float:
    """Negative log marginal likelihood with theta integrated out.

    -log N(y; Phi theta_mean_prior, K + Phi S0 Phi^T).
    """
    features = np.asarray(features, dtype=float)
    labels = np.asarray(labels, dtype=float).reshape(-1)
    P = labels.shape[0]
    M = kernel_gram(features, kernel)
    r = labels.copy()
    if basis.n_theta:
        Phi = basis_eval_many(basis, features)
        M = M + Phi @ np.asarray(theta_cov_prior, dtype=float) @ Phi.T
        r = r - Phi @ np.asarray(theta_mean_prior, dtype=float)
    try:
        L = chol_psd(M)
    except NotPositiveSemidefiniteError as err:
        raise FitError("marginal covariance singular") from err
    z = np.linalg.solve(L, r)
    nll = 0.5 * (z @ z) + np.sum(np.log(np.diag(L))) + 0.5 * P * np.log(2.0 * np.pi)
    if not np.isfinite(nll):
        raise FitError("non-finite marginal likelihood")
    return float(nll)


def _pack_params(kernel: KernelParams, basis: BasisSpec) -> np.ndarray:
    """Flatten tunable hyperparameters; positives in log space.

    rbf centers stay fixed at their initial (data-chosen) locations; only
    their lengths are tuned. Fourier frequencies and the shared projection
    are tuned in raw space.
    """
    parts = [np.log([kernel.amplitude]), np.log(kernel.lengthscales), np.log([kernel.noise])]
    if basis.variant == "rbf":
        parts.append(np.log(basis.lengths))
    elif basis.variant == "fourier":
        parts.append(basis.frequencies)
        parts.append(basis.projection)
    return np.concatenate(parts)


def _unpack_params(
    vec: np.ndarray, kernel: KernelParams, basis: BasisSpec
) -> tuple[KernelParams, BasisSpec]:
    n = kernel.n_xi
    new_kernel = KernelParams(
        amplitude=float(np.exp(vec[0])),
        lengthscales=np.exp(vec[1 : 1 + n]),
        noise=float(np.exp(vec[1 + n])),
    )
    rest = vec[2 + n :]
    if basis.variant == "rbf":
        new_basis = replace(basis, lengths=np.exp(rest))
    elif basis.variant == "fourier":
        d = basis.degree
        new_basis = replace(basis, frequencies=rest[:d], projection=rest[d:])
    else:
        new_basis = basis
    return new_kernel, new_basis


def tune(
    features: np.ndarray,
    labels: np.ndarray,
    kernel: KernelParams,
    basis: BasisSpec,
    theta_mean_prior: np.ndarray,
    theta_cov_prior: np.ndarray,
    steps: int = 200,
    learning_rate: float = 0.1,
) -> tuple[KernelParams, BasisSpec]:
    """Tune hyperparameters by descending the marginal NLL.

    Plain gradient descent with central-difference gradients (step 1e-5 in
    the packed space) and a halving safeguard so accepted iterates never
    increase the NLL; the best-seen parameters are returned. Deterministic
    for fixed inputs and step count; steps=0 is a no-op.
    """
    if np.asarray(labels).size < 2:
        raise ValueError("tuning needs at least two samples")

    def nll_of(vec: np.ndarray) -> float:
        kp, bs = _unpack_params(vec, kernel, basis)
        try:
            return marginal_nll(features, labels, kp, bs, theta_mean_prior, theta_cov_prior)
        except (FitError, FloatingPointError):
            return np.inf

    vec = _pack_params(kernel, basis)
    best_vec = vec.copy()
    best_nll = nll_of(vec)
    current = best_nll
    lr = learning_rate
    h = 1e-5
    for _ in range(steps):
        grad = np.zeros_like(vec)
        for i in range(vec.size):
            probe = vec.copy()
            probe[i] += h
            up = nll_of(probe)
            probe[i] -= 2 * h
            down = nll_of(probe)
            grad[i] = (up - down) / (2 * h) if np.isfinite(up) and np.isfinite(down) else 0.0
        norm = np.linalg.norm(grad)
        if norm == 0.0:
            break
        step_lr = lr
        for _ in range(8):
            candidate = vec - step_lr * grad / max(norm, 1.0)
            cand_nll = nll_of(candidate)
            if cand_nll < current:
                vec = candidate
                current = cand_nll
                break
            step_lr *= 0.5
        else:
            lr *= 0.5  # keep shrinking across iterations when stuck
            continue
        if current < best_nll:
            best_nll = current
            best_vec = vec.copy()
    return _unpack_params(best_vec, kernel, basis)


# ---------------------------------------------------------------------------
# Checkpoint serialization. Floats are stored as hex strings so round trips
# are bit-exact.


def _hex(values: np.ndarray) -> list:
    arr = np.asarray(values, dtype=float)
    flat = [v.hex() for v in arr.ravel().tolist()]
    return {"shape": list(arr.shape), "data": flat}


def _unhex(obj) -> np.ndarray:
    arr = np.array([float.fromhex(s) for s in obj["data"]], dtype=float)
    return arr.reshape(obj["shape"])


def subsystem_to_dict(sub: SubsystemGP) -> dict:
    basis = {"variant": sub.basis.variant, "n_xi": sub.basis.n_xi, "degree": sub.basis.degree}
    for name in ("frequencies", "projection", "centers", "lengths"):
        val = getattr(sub.basis, name)
        if val is not None:
            basis[name] = _hex(val)
    return {
        "kernel": {
            "amplitude": sub.kernel.amplitude.hex(),
            "lengthscales": _hex(sub.kernel.lengthscales),
            "noise": sub.kernel.noise.hex(),
        },
        "basis": basis,
        "budget": sub.budget,
        "features": _hex(sub.features),
        "labels": _hex(sub.labels),
        "alpha": _hex(sub.alpha),
        "beta": _hex(sub.beta),
        "cmat": _hex(sub.cmat),
        "theta_mean": _hex(sub.theta_mean),
        "theta_cov": _hex(sub.theta_cov),
        "theta_mean_prior": _hex(sub.theta_mean_prior),
        "theta_cov_prior": _hex(sub.theta_cov_prior),
    }


def subsystem_from_dict(obj: dict) -> SubsystemGP:
    kernel = KernelParams(
        amplitude=float.fromhex(obj["kernel"]["amplitude"]),
        lengthscales=_unhex(obj["kernel"]["lengthscales"]),
        noise=float.fromhex(obj["kernel"]["noise"]),
    )
    braw = obj["basis"]
    basis = BasisSpec(
        variant=braw["variant"],
        n_xi=braw["n_xi"],
        degree=braw["degree"],
        frequencies=_unhex(braw["frequencies"]) if "frequencies" in braw else None,
        projection=_unhex(braw["projection"]) if "projection" in braw else None,
        centers=_unhex(braw["centers"]) if "centers" in braw else None,
        lengths=_unhex(braw["lengths"]) if "lengths" in braw else None,
    )
    n_theta = basis.n_theta
    return SubsystemGP(
        features=_unhex(obj["features"]).reshape(-1, kernel.n_xi),
        labels=_unhex(obj["labels"]).reshape(-1),
        alpha=_unhex(obj["alpha"]).reshape(-1),
        beta=_unhex(obj["beta"]).reshape(-1, n_theta),
        cmat=_unhex(obj["cmat"]),
        theta_mean=_unhex(obj["theta_mean"]).reshape(n_theta),
        theta_cov=_unhex(obj["theta_cov"]).reshape(n_theta, n_theta),
        theta_mean_prior=_unhex(obj["theta_mean_prior"]).reshape(n_theta),
        theta_cov_prior=_unhex(obj["theta_cov_prior"]).reshape(n_theta, n_theta),
        kernel=kernel,
        basis=basis,
        budget=obj["budget"],
    )


def model_to_json(model: ModelGP) -> str:
    """Serialize a ModelGP checkpoint to a JSON string (bit-exact floats)."""
    return json.dumps(
        {"subsystems": [subsystem_to_dict(sub) for sub in model.subsystems]}, indent=1
    )


def model_from_json(text: str) -> ModelGP:
    obj = json.loads(text)
    return ModelGP(subsystems=tuple(subsystem_from_dict(s) for s in obj["subsystems"]))
