"""Receding-horizon experiment harness.

Owns configuration ingestion, initial-dataset generation, the learn/plan/act
MPC loop, single-shot trajectory optimization, the pool-sparsification
benchmark, reference paths, metrics, and result-file output. All randomness
flows through named seeds so reruns are bit-identical apart from timing.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from dualmpc import objective, plants, sfhdp, sgp
from dualmpc.gaussmath import GaussianBelief
from dualmpc.objective import ExplorationSpec, QuadraticCostSpec
from dualmpc.plants import DivergenceError, PlantSpec
from dualmpc.sfhdp import CostFunctions, DynamicsModel, SolveOptions
from dualmpc.sgp import BasisSpec, KernelParams, ModelGP


class ConfigError(ValueError):
    """Configuration file is malformed, has unknown keys, or bad values."""


MODES = ("mpc-aif", "mpc-plain", "trajopt-only", "fit-gp", "sparsify-bench", "sigma-check")


# ---------------------------------------------------------------------------
# Configuration


@dataclass
class GPConfig:
    kernel: KernelParams
    basis_variant: str = "none"
    basis_degree: int = 0
    theta_prior_scale: float = 1.0
    budget: int = 15
    init_size: int = 15
    x_low: np.ndarray = None
    x_high: np.ndarray = None
    u_low: np.ndarray = None
    u_high: np.ndarray = None
    tune_steps: int = 0
    tune_subset: int = 200


@dataclass
class ReferenceConfig:
    kind: str  # regulation | lemniscate
    goal: Optional[np.ndarray] = None
    scale: float = 10.0
    period: float = 40.0


@dataclass
class CostConfig:
    W: np.ndarray
    R: np.ndarray
    W_H: np.ndarray
    reference: ReferenceConfig


@dataclass
class SparsifyConfig:
    train_size: int = 1000
    test_size: int = 64
    bases: tuple = ("none", "linear", "polynomial", "fourier", "rbf")
    degrees: dict = field(default_factory=lambda: {"polynomial": 5, "fourier": 8, "rbf": 16})
    min_pool: int = 5
    dense_below: int = 200
    stride_above: int = 10


@dataclass
class ExperimentConfig:
    mode: str
    plant: PlantSpec
    x0: np.ndarray
    init_cov: np.ndarray
    horizon: int
    steps: int
    cost: CostConfig
    gamma: float = 0.0
    exploration_mode: str = "off"
    gp: Optional[GPConfig] = None
    solver: SolveOptions = field(default_factory=SolveOptions)
    seed_data: int = 0
    seed_noise: int = 1
    model: str = "gp"  # gp | true-plant
    belief_from_measurement: bool = False
    output_dir: Optional[str] = None
    sparsify: Optional[SparsifyConfig] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if self.model not in ("gp", "true-plant"):
            raise ConfigError(f"unknown model {self.model!r}")


def _take(obj: dict, where: str, key: str, default=...):
    if key in obj:
        return obj.pop(key)
    if default is ...:
        raise ConfigError(f"missing key {key!r} in {where}")
    return default


def _done(obj: dict, where: str):
    if obj:
        raise ConfigError(f"unknown keys {sorted(obj)} in {where}")


def _as_matrix(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(n)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ConfigError(f"{name} diagonal must have length {n}")
        return np.diag(arr)
    if arr.shape != (n, n):
        raise ConfigError(f"{name} must be {n}x{n}")
    return arr


def _as_vector(value, n: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"{name} must have length {n}")
    return arr


_PLANT_FACTORIES = {
    "pendulum": plants.pendulum_spec,
    "scalar_toy": plants.scalar_toy_spec,
    "vehicle6dof": plants.vehicle_spec,
}


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON, rejecting unknown keys."""
    raw = json.loads(json.dumps(raw))  # deep copy, and enforce JSON types
    mode = _take(raw, "config", "mode")

    praw = _take(raw, "config", "plant")
    name = _take(praw, "plant", "name")
    if name not in _PLANT_FACTORIES:
        raise ConfigError(f"unknown plant {name!r}")
    dt = _take(praw, "plant", "dt", 0.1)
    noise = _take(praw, "plant", "noise", None)
    params = _take(praw, "plant", "params", {})
    bounds = _take(praw, "plant", "action_bounds", None)
    _done(praw, "plant")
    kwargs = dict(params)
    if noise is not None:
        kwargs["noise"] = noise
    plant = _PLANT_FACTORIES[name](dt=dt, **kwargs)
    if bounds is not None:
        plant = replace(plant, action_bounds=np.asarray(bounds, dtype=float))

    iraw = _take(raw, "config", "init", {})
    x0 = _as_vector(_take(iraw, "init", "state", 0.0), plant.n_x, "init.state")
    init_cov = _as_matrix(_take(iraw, "init", "cov", 1e-3), plant.n_x, "init.cov")
    _done(iraw, "init")

    horizon = int(_take(raw, "config", "horizon"))
    steps = int(_take(raw, "config", "steps", 0))

    craw = _take(raw, "config", "cost")
    W = _as_matrix(_take(craw, "cost", "W"), plant.n_x, "W")
    R = _as_matrix(_take(craw, "cost", "R"), plant.n_u, "R")
    W_H = _as_matrix(_take(craw, "cost", "W_H"), plant.n_x, "W_H")
    rraw = _take(craw, "cost", "reference", {"kind": "regulation", "goal": 0.0})
    kind = _take(rraw, "reference", "kind")
    if kind == "regulation":
        ref = ReferenceConfig(kind, goal=_as_vector(_take(rraw, "reference", "goal", 0.0), plant.n_x, "goal"))
    elif kind == "lemniscate":
        ref = ReferenceConfig(
            kind,
            scale=float(_take(rraw, "reference", "scale", 10.0)),
            period=float(_take(rraw, "reference", "period", 40.0)),
        )
    else:
        raise ConfigError(f"unknown reference kind {kind!r}")
    _done(rraw, "reference")
    _done(craw, "cost")
    cost = CostConfig(W=W, R=R, W_H=W_H, reference=ref)

    eraw = _take(raw, "config", "exploration", {})
    gamma = float(_take(eraw, "exploration", "gamma", 0.0))
    expl_mode = _take(eraw, "exploration", "mode", "full" if gamma > 0 else "off")
    _done(eraw, "exploration")

    gp_cfg = None
    graw = _take(raw, "config", "gp", None)
    if graw is not None:
        kraw = _take(graw, "gp", "kernel", {})
        n_xi = plant.n_x + plant.n_u
        kernel = KernelParams(
            amplitude=float(_take(kraw, "gp.kernel", "amplitude", 1.0)),
            lengthscales=_as_vector(_take(kraw, "gp.kernel", "lengthscales", 1.0), n_xi, "lengthscales"),
            noise=float(_take(kraw, "gp.kernel", "noise", 1e-2)),
        )
        _done(kraw, "gp.kernel")
        braw = _take(graw, "gp", "basis", {"variant": "none"})
        variant = _take(braw, "gp.basis", "variant", "none")
        degree = int(_take(braw, "gp.basis", "degree", 0))
        _done(braw, "gp.basis")
        rngraw = _take(graw, "gp", "ranges")
        gp_cfg = GPConfig(
            kernel=kernel,
            basis_variant=variant,
            basis_degree=degree,
            theta_prior_scale=float(_take(graw, "gp", "theta_prior_scale", 1.0)),
            budget=int(_take(graw, "gp", "budget", 15)),
            init_size=int(_take(graw, "gp", "init_size", 15)),
            x_low=_as_vector(_take(rngraw, "gp.ranges", "x_low"), plant.n_x, "x_low"),
            x_high=_as_vector(_take(rngraw, "gp.ranges", "x_high"), plant.n_x, "x_high"),
            u_low=_as_vector(_take(rngraw, "gp.ranges", "u_low"), plant.n_u, "u_low"),
            u_high=_as_vector(_take(rngraw, "gp.ranges", "u_high"), plant.n_u, "u_high"),
            tune_steps=int(_take(graw, "gp", "tune_steps", 0)),
            tune_subset=int(_take(graw, "gp", "tune_subset", 200)),
        )
        _done(rngraw, "gp.ranges")
        _done(graw, "gp")

    sraw = _take(raw, "config", "solver", {})
    solver = SolveOptions(
        max_iters=int(_take(sraw, "solver", "max_iters", 100)),
        tol=float(_take(sraw, "solver", "tol", 1e-4)),
        reg0=float(_take(sraw, "solver", "reg0", 0.0)),
        line_search_steps=int(_take(sraw, "solver", "line_search_steps", 5)),
        deterministic_mode=bool(_take(sraw, "solver", "deterministic", False)),
        quad_floor=float(_take(sraw, "solver", "quad_floor", 0.1)),
    )
    _done(sraw, "solver")

    seraw = _take(raw, "config", "seeds", {})
    seed_data = int(_take(seraw, "seeds", "data", 0))
    seed_noise = int(_take(seraw, "seeds", "noise", 1))
    _done(seraw, "seeds")

    spraw = _take(raw, "config", "sparsify", None)
    sparsify = None
    if spraw is not None:
        degrees = _take(spraw, "sparsify", "degrees", {"polynomial": 5, "fourier": 8, "rbf": 16})
        sparsify = SparsifyConfig(
            train_size=int(_take(spraw, "sparsify", "train_size", 1000)),
            test_size=int(_take(spraw, "sparsify", "test_size", 64)),
            bases=tuple(_take(spraw, "sparsify", "bases", ["none", "linear", "polynomial", "fourier", "rbf"])),
            degrees={k: int(v) for k, v in degrees.items()},
            min_pool=int(_take(spraw, "sparsify", "min_pool", 5)),
            dense_below=int(_take(spraw, "sparsify", "dense_below", 200)),
            stride_above=int(_take(spraw, "sparsify", "stride_above", 10)),
        )
        _done(spraw, "sparsify")

    config = ExperimentConfig(
        mode=mode,
        plant=plant,
        x0=x0,
        init_cov=init_cov,
        horizon=horizon,
        steps=steps,
        cost=cost,
        gamma=gamma,
        exploration_mode=expl_mode,
        gp=gp_cfg,
        solver=solver,
        seed_data=seed_data,
        seed_noise=seed_noise,
        model=_take(raw, "config", "model", "gp"),
        belief_from_measurement=bool(_take(raw, "config", "belief_from_measurement", False)),
        output_dir=_take(raw, "config", "output_dir", None),
    )
    config.sparsify = sparsify
    _done(raw, "config")
    return config


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# Reference paths


def reference_path(ref: ReferenceConfig, t: float, n_x: int) -> np.ndarray:
    """Reference state at time t seconds.

    regulation: the constant goal. lemniscate: a Gerono figure-eight
    X = a sin(2 pi t / T), Y = (a/2) sin(4 pi t / T), with heading, speed,
    and yaw-rate references from its analytic derivatives (heading wrapped
    to (-pi, pi]; use build_reference_table for an unwrapped sequence).
    Remaining state entries are zero and should carry zero cost weight.
    """
    if ref.kind == "regulation":
        return ref.goal.copy()
    a, T = ref.scale, ref.period
    wt = 2.0 * np.pi * t / T
    x = a * np.sin(wt)
    y = 0.5 * a * np.sin(2.0 * wt)
    dx = a * (2.0 * np.pi / T) * np.cos(wt)
    dy = a * (4.0 * np.pi / T) * 0.5 * np.cos(2.0 * wt)
    ddx = -a * (2.0 * np.pi / T) ** 2 * np.sin(wt)
    ddy = -a * 0.5 * (4.0 * np.pi / T) ** 2 * np.sin(2.0 * wt)
    speed_sq = dx * dx + dy * dy
    heading = np.arctan2(dy, dx)
    yaw_rate = (dx * ddy - dy * ddx) / max(speed_sq, 1e-12)
    out = np.zeros(n_x)
    out[0] = x
    out[1] = y
    if n_x >= 6:
        out[2] = heading
        out[3] = np.sqrt(speed_sq)
        out[4] = 0.0
        out[5] = yaw_rate
    return out


def build_reference_table(ref: ReferenceConfig, dt: float, n_steps: int, n_x: int) -> np.ndarray:
    """Sampled reference over absolute step indices 0..n_steps (inclusive).

    The lemniscate heading column is unwrapped along the sequence so
    quadratic heading errors stay free of 2 pi jumps.
    """
    table = np.array([reference_path(ref, k * dt, n_x) for k in range(n_steps + 1)])
    if ref.kind == "lemniscate" and n_x >= 6:
        table[:, 2] = np.unwrap(table[:, 2])
    return table


def build_cost_spec(config: ExperimentConfig) -> QuadraticCostSpec:
    table = build_reference_table(
        config.cost.reference, config.plant.dt, config.steps + config.horizon + 1, config.plant.n_x
    )

    def reference(k: int) -> np.ndarray:
        return table[min(max(k, 0), table.shape[0] - 1)]

    return QuadraticCostSpec(W=config.cost.W, R=config.cost.R, W_H=config.cost.W_H, reference=reference)


# ---------------------------------------------------------------------------
# Data generation and model building


def generate_initial_dataset(
    plant: PlantSpec,
    x_low: np.ndarray,
    x_high: np.ndarray,
    u_low: np.ndarray,
    u_high: np.ndarray,
    size: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Uniform state-action samples with one noisy plant step as the label.

    Returns (features (size, n_x + n_u), labels (size, n_x)); deterministic
    per seed.
    """
    if size < 1:
        raise ValueError("dataset size must be >= 1")
    x_low = np.asarray(x_low, dtype=float)
    x_high = np.asarray(x_high, dtype=float)
    u_low = np.asarray(u_low, dtype=float)
    u_high = np.asarray(u_high, dtype=float)
    if np.any(x_high < x_low) or np.any(u_high < u_low):
        raise ValueError("empty sampling ranges")
    rng = np.random.default_rng(seed)
    X = rng.uniform(x_low, x_high, size=(size, plant.n_x))
    U = rng.uniform(u_low, u_high, size=(size, plant.n_u))
    nxt = plant.step(X, U)
    chol = np.linalg.cholesky(plant.process_noise + 1e-300 * np.eye(plant.n_x))
    labels = nxt + rng.standard_normal((size, plant.n_x)) @ chol.T
    return np.hstack([X, U]), labels


def default_basis(variant: str, degree: int, features: np.ndarray, seed: int) -> BasisSpec:
    """Initial basis for a variant; data-dependent pieces are seeded.

    rbf centers are a random subset of the features with a shared median
    squared-distance length; fourier uses evenly spread frequencies along a
    uniform unit projection.
    """
    n_xi = features.shape[1]
    if variant == "none":
        return BasisSpec.none(n_xi)
    if variant == "linear":
        return BasisSpec.linear(n_xi)
    if variant == "polynomial":
        return BasisSpec.polynomial(n_xi, degree)
    if variant == "fourier":
        freqs = np.linspace(0.3, 3.0, degree)
        proj = np.ones(n_xi) / np.sqrt(n_xi)
        return BasisSpec.fourier(freqs, proj)
    if variant == "rbf":
        rng = np.random.default_rng(seed)
        idx = rng.choice(features.shape[0], size=min(degree, features.shape[0]), replace=False)
        centers = features[np.sort(idx)]
        if centers.shape[0] < degree:
            extra = rng.uniform(features.min(0), features.max(0), size=(degree - centers.shape[0], n_xi))
            centers = np.vstack([centers, extra])
        sub = features[:: max(1, features.shape[0] // 64)]
        d2 = np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=2)
        med = np.median(d2[d2 > 0]) if np.any(d2 > 0) else 1.0
        return BasisSpec.rbf(centers, np.full(degree, med))
    raise ConfigError(f"unknown basis variant {variant!r}")


def fit_model(
    features: np.ndarray,
    labels: np.ndarray,
    kernel: KernelParams,
    basis: BasisSpec,
    theta_prior_scale: float,
    budget: int,
    tune_steps: int = 0,
    tune_subset: int = 200,
) -> ModelGP:
    """Per-dimension tune (optional) and batch fit of the full model."""
    subsystems = []
    n_theta = basis.n_theta
    mu0 = np.zeros(n_theta)
    S0 = theta_prior_scale * np.eye(n_theta)
    sub_idx = slice(None) if features.shape[0] <= tune_subset else slice(0, tune_subset)
    for i in range(labels.shape[1]):
        k_i, b_i = kernel, basis
        if tune_steps > 0:
            k_i, b_i = sgp.tune(
                features[sub_idx], labels[sub_idx, i], kernel, basis, mu0, S0, steps=tune_steps
            )
        subsystems.append(sgp.batch_fit(features, labels[:, i], k_i, b_i, mu0, S0, budget=budget))
    return ModelGP(subsystems=tuple(subsystems))


def build_model(config: ExperimentConfig) -> tuple[ModelGP, np.ndarray, np.ndarray]:
    """Generate the initial dataset and fit the starting model."""
    gp_cfg = config.gp
    if gp_cfg is None:
        raise ConfigError("mode requires a gp section")
    features, labels = generate_initial_dataset(
        config.plant,
        gp_cfg.x_low,
        gp_cfg.x_high,
        gp_cfg.u_low,
        gp_cfg.u_high,
        gp_cfg.init_size,
        config.seed_data,
    )
    basis = default_basis(gp_cfg.basis_variant, gp_cfg.basis_degree, features, config.seed_data)
    # amplitude heuristic: label variance per dimension is folded in by tune;
    # the configured kernel is the shared starting point.
    model = fit_model(
        features,
        labels,
        gp_cfg.kernel,
        basis,
        gp_cfg.theta_prior_scale,
        gp_cfg.budget,
        tune_steps=gp_cfg.tune_steps,
        tune_subset=gp_cfg.tune_subset,
    )
    return model, features, labels


def model_probe_mse(model: ModelGP, plant: PlantSpec, X: np.ndarray, u: np.ndarray) -> float:
    """Mean squared error of the model mean against a noiseless plant step."""
    X = np.atleast_2d(X)
    U = np.broadcast_to(np.asarray(u, dtype=float), (X.shape[0], plant.n_u))
    truth = plant.step(X, U)
    pred = model.predict_mean_many(np.hstack([X, U]))
    return float(np.mean((pred - truth) ** 2))


# ---------------------------------------------------------------------------
# Cost-function assembly


def make_cost_functions(
    spec: QuadraticCostSpec,
    expl: ExplorationSpec,
    model: Optional[ModelGP],
    t0: int,
) -> CostFunctions:
    """Bind the stage/terminal costs to absolute time offset t0."""

    def stage(xi, k):
        return objective.efe_stage_cost(spec, expl, model, xi, t0 + k)

    def stage_many(Xi, k):
        return objective.efe_stage_cost_many(spec, expl, model, Xi, t0 + k)

    def terminal(x, k):
        return objective.terminal_cost(spec, x, t0 + k)

    def terminal_many(X, k):
        return objective.terminal_cost_many(spec, X, t0 + k)

    return CostFunctions(stage=stage, terminal=terminal, stage_many=stage_many, terminal_many=terminal_many)


# ---------------------------------------------------------------------------
# Run records and metrics


@dataclass
class RunRecord:
    """Per-step MPC log plus run summary."""

    x0: np.ndarray
    columns: list
    rows: list  # list of dicts keyed by columns
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row[c]) for c in self.columns])
        return buf.getvalue()


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics(record: RunRecord, cost_spec: QuadraticCostSpec, dt: float) -> dict:
    """Error, control effort, and mean per-step solver time.

    Error sums (x_t - ref_t)^T W (x_t - ref_t) over the observed states
    x_1..x_T; control effort sums u^T R u over the applied actions. These
    definitions are local reconstructions; comparisons across runs of the
    same task are what they are used for.
    """
    n_x = cost_spec.n_x
    n_u = cost_spec.n_u
    error = 0.0
    effort = 0.0
    times = []
    for row in record.rows:
        t = int(row["t"])
        x = np.array([row[f"x_{i+1}"] for i in range(n_x)])
        u = np.array([row[f"u_{i+1}"] for i in range(n_u)])
        dx = x - cost_spec.reference(t + 1)
        error += float(dx @ cost_spec.W @ dx)
        effort += float(u @ cost_spec.R @ u)
        times.append(row["wall_ms"])
    return {
        "error": error,
        "control_effort": effort,
        "mean_step_ms": float(np.mean(times)) if times else 0.0,
    }


# ---------------------------------------------------------------------------
# Experiment drivers


def _dynamics_for(config: ExperimentConfig, model: Optional[ModelGP]) -> DynamicsModel:
    if config.model == "true-plant":
        return DynamicsModel.from_plant(config.plant)
    return DynamicsModel.from_gp(model, config.plant.n_u)


def _shift_actions(actions: np.ndarray) -> np.ndarray:
    """Warm start: drop the applied first action, repeat the last."""
    if actions.shape[0] <= 1:
        return actions.copy()
    return np.vstack([actions[1:], actions[-1:]])


def run_mpc(config: ExperimentConfig) -> RunRecord:
    """The full receding-horizon loop: solve, act, observe, learn, repeat.

    Returns a RunRecord with one row per executed step. Plant divergence
    aborts early and marks the partial record; solver stalls are recorded
    and the loop continues with the best policy found.
    """
    plant = config.plant
    n_x, n_u = plant.n_x, plant.n_u
    cost_spec = build_cost_spec(config)

    model = None
    if config.model == "gp":
        model, _, _ = build_model(config)
    expl = ExplorationSpec.off()
    if config.exploration_mode != "off" and config.gamma > 0 and model is not None:
        expl = ExplorationSpec.for_model(config.gamma, config.exploration_mode, model)

    noise_rng = np.random.default_rng(config.seed_noise)
    x_true = config.x0.copy()
    belief = GaussianBelief(config.x0.copy(), config.init_cov.copy())
    actions_guess = np.zeros((config.horizon, n_u))

    columns = (
        ["t"]
        + [f"u_{i+1}" for i in range(n_u)]
        + [f"x_{i+1}" for i in range(n_x)]
        + [f"belief_mean_{i+1}" for i in range(n_x)]
        + [f"belief_var_{i+1}" for i in range(n_x)]
        + ["stage_cost", "exploration_cost", "iterations", "wall_ms"]
    )
    rows = []
    history_rows = []
    stalls = 0
    diverged = False

    for t in range(config.steps):
        dyn = _dynamics_for(config, model)
        cost_fns = make_cost_functions(cost_spec, expl, model, t)
        tic = time.perf_counter()
        result = sfhdp.solve(belief, dyn, cost_fns, config.solver, init_actions=actions_guess)
        wall_ms = (time.perf_counter() - tic) * 1e3
        if result.stalled:
            stalls += 1
        for h in result.history:
            history_rows.append({"t": t, **h})

        u = result.policy.action(0, belief.mean) if len(result.policy) else np.zeros(n_u)
        if plant.action_bounds is not None:
            u = np.clip(u, plant.action_bounds[:, 0], plant.action_bounds[:, 1])
        xi_t = np.concatenate([x_true, u])
        try:
            x_next = plants.simulate(plant, x_true, u[None, :], rng=noise_rng)[-1]
        except DivergenceError:
            diverged = True
            break

        if model is not None:
            model = sgp.gp_update(model, xi_t, x_next)
            if expl.mode != "off":
                expl = replace(expl, offset=objective.exploration_offset(model))
        if config.belief_from_measurement or model is None:
            belief = GaussianBelief(x_next.copy(), config.init_cov.copy())
        else:
            mean = model.predict_mean_many(xi_t[None, :])[0]
            var = model.predict_var_many(xi_t[None, :])[0]
            belief = GaussianBelief(mean, np.diag(var))

        stage = objective.stage_cost(cost_spec, xi_t, t)
        expl_cost = (
            objective.exploration_cost(model, xi_t, expl.mode) if expl.mode != "off" else 0.0
        )
        row = {"t": t}
        row.update({f"u_{i+1}": float(u[i]) for i in range(n_u)})
        row.update({f"x_{i+1}": float(x_next[i]) for i in range(n_x)})
        row.update({f"belief_mean_{i+1}": float(belief.mean[i]) for i in range(n_x)})
        row.update({f"belief_var_{i+1}": float(belief.cov[i, i]) for i in range(n_x)})
        row.update(
            {
                "stage_cost": float(stage),
                "exploration_cost": float(expl_cost),
                "iterations": len(result.history) - 1,
                "wall_ms": wall_ms,
            }
        )
        rows.append(row)
        x_true = x_next
        actions_guess = _shift_actions(result.nominal.mean_actions())

    record = RunRecord(x0=config.x0.copy(), columns=columns, rows=rows, summary={})
    summary = metrics(record, cost_spec, plant.dt)
    summary.update({"steps": len(rows), "stalls": stalls, "diverged": diverged})
    record.summary = summary
    record.summary["history"] = history_rows
    record.summary["final_model"] = model
    return record


def run_trajopt(config: ExperimentConfig) -> sfhdp.SolveResult:
    """Fit a model offline (or use the true plant) and solve one horizon."""
    model = None
    if config.model == "gp":
        model, _, _ = build_model(config)
    expl = ExplorationSpec.off()
    if config.exploration_mode != "off" and config.gamma > 0 and model is not None:
        expl = ExplorationSpec.for_model(config.gamma, config.exploration_mode, model)
    cost_spec = build_cost_spec(config)
    dyn = _dynamics_for(config, model)
    cost_fns = make_cost_functions(cost_spec, expl, model, 0)
    belief = GaussianBelief(config.x0.copy(), config.init_cov.copy())
    return sfhdp.solve(
        belief, dyn, cost_fns, config.solver, init_actions=np.zeros((config.horizon, config.plant.n_u))
    )


def run_sparsify_bench(config: ExperimentConfig) -> list:
    """Pool-shrinking study: test MSE and predictive variance per basis.

    Trains on train_size points, tunes per basis, then repeatedly removes
    the lowest-scoring pool point from every subsystem, logging test MSE
    (mean over output dimensions) and the summed predictive variance. Below
    dense_below the log has every pool size; above, every stride_above-th.
    """
    sp_cfg = config.sparsify or SparsifyConfig()
    gp_cfg = config.gp
    if gp_cfg is None:
        raise ConfigError("sparsify-bench requires a gp section")
    plant = config.plant
    features, labels = generate_initial_dataset(
        plant, gp_cfg.x_low, gp_cfg.x_high, gp_cfg.u_low, gp_cfg.u_high,
        sp_cfg.train_size, config.seed_data,
    )
    test_x, test_y = generate_initial_dataset(
        plant, gp_cfg.x_low, gp_cfg.x_high, gp_cfg.u_low, gp_cfg.u_high,
        sp_cfg.test_size, config.seed_data + 1,
    )

    results = []
    for variant in sp_cfg.bases:
        degree = sp_cfg.degrees.get(variant, 0)
        basis = default_basis(variant, degree, features, config.seed_data)
        model = fit_model(
            features, labels, gp_cfg.kernel, basis, gp_cfg.theta_prior_scale,
            budget=sp_cfg.train_size, tune_steps=gp_cfg.tune_steps, tune_subset=gp_cfg.tune_subset,
        )
        subs = list(model.subsystems)

        def log_point(pool_size):
            sq_err = np.zeros(sp_cfg.test_size)
            var_sum = np.zeros(sp_cfg.test_size)
            for i, sub in enumerate(subs):
                mean, var = sgp.predict_many(sub, test_x)
                sq_err += (mean - test_y[:, i]) ** 2
                var_sum += var
            results.append(
                {
                    "basis": variant,
                    "pool": pool_size,
                    "mse": float(np.mean(sq_err) / len(subs)),
                    "mean_var": float(np.mean(var_sum)),
                }
            )

        pool = sp_cfg.train_size
        log_point(pool)
        while pool > sp_cfg.min_pool:
            subs = [sgp.remove(sub, int(np.argmin(sgp.elimination_scores(sub)))) for sub in subs]
            pool -= 1
            if pool <= sp_cfg.dense_below or pool % sp_cfg.stride_above == 0:
                log_point(pool)
    return results


# ---------------------------------------------------------------------------
# Output files


def write_run_outputs(
    config: ExperimentConfig,
    record: RunRecord,
    out_dir: str,
    raw_config: Optional[dict] = None,
) -> None:
    """Emit config snapshot, per-step CSV, solver-history CSV, GP checkpoint,
    and summary JSON into the run directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if raw_config is not None:
        (out / "config.json").write_text(json.dumps(raw_config, indent=1, sort_keys=True))
    (out / "record.csv").write_text(record.to_csv())

    history = record.summary.get("history", [])
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["t", "iteration", "objective", "alpha", "reg", "wall_ms"])
    for h in history:
        writer.writerow([h["t"], h["iteration"], _fmt(h["objective"]), _fmt(h["alpha"]), _fmt(h["reg"]), _fmt(h["wall_ms"])])
    (out / "history.csv").write_text(buf.getvalue())

    model = record.summary.get("final_model")
    if model is not None:
        (out / "gp_checkpoint.json").write_text(sgp.model_to_json(model))

    summary = {
        k: v for k, v in record.summary.items() if k not in ("history", "final_model")
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))


def trajectory_to_csv(dt: float, states: np.ndarray, actions: Optional[np.ndarray] = None) -> str:
    """One row per step: t, x..., u... (terminal row has empty action cells)."""
    states = np.atleast_2d(states)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    n_x = states.shape[1]
    n_u = actions.shape[1] if actions is not None else 0
    writer.writerow(["t"] + [f"x_{i+1}" for i in range(n_x)] + [f"u_{i+1}" for i in range(n_u)])
    for k, x in enumerate(states):
        urow = (
            [_fmt(float(v)) for v in actions[k]]
            if actions is not None and k < actions.shape[0]
            else [""] * n_u
        )
        writer.writerow([_fmt(k * dt)] + [_fmt(float(v)) for v in x] + urow)
    return buf.getvalue()


def write_trajopt_outputs(
    config: ExperimentConfig,
    result: sfhdp.SolveResult,
    out_dir: str,
    raw_config: Optional[dict] = None,
) -> None:
    """Emit solver history and the optimized nominal trajectory as CSV."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if raw_config is not None:
        (out / "config.json").write_text(json.dumps(raw_config, indent=1, sort_keys=True))
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iteration", "objective", "alpha", "reg", "wall_ms"])
    for h in result.history:
        writer.writerow(
            [h["iteration"], _fmt(h["objective"]), _fmt(h["alpha"]), _fmt(h["reg"]), _fmt(h["wall_ms"])]
        )
    (out / "history.csv").write_text(buf.getvalue())
    states = np.array([b.mean[: config.plant.n_x] for b in result.nominal.beliefs])
    (out / "trajectory.csv").write_text(
        trajectory_to_csv(config.plant.dt, states, result.nominal.mean_actions())
    )
