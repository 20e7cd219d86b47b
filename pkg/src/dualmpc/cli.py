"""Command-line front end.

Subcommands: run-mpc, run-trajopt, sparsify-bench, fit-gp, sigma-check.
Exit codes: 0 success, 2 configuration error, 3 numerical failure,
4 plant divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from dualmpc import harness, sgp
from dualmpc.gaussmath import NotPositiveSemidefiniteError, ut5_unit_points
from dualmpc.harness import ConfigError
from dualmpc.sfhdp import IllConditionedQError
from dualmpc.plants import DivergenceError
from dualmpc.sgp import FitError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_DIVERGENCE = 4


def _load(args) -> tuple[harness.ExperimentConfig, dict]:
    with open(args.config) as fh:
        raw = json.load(fh)
    config = harness.config_from_dict(raw)
    if getattr(args, "seed", None) is not None:
        config.seed_data = args.seed
        config.seed_noise = args.seed + 1
        raw.setdefault("seeds", {})
        raw["seeds"] = {"data": config.seed_data, "noise": config.seed_noise}
    if getattr(args, "out", None) is not None:
        config.output_dir = args.out
    return config, raw


def cmd_run_mpc(args) -> int:
    config, raw = _load(args)
    record = harness.run_mpc(config)
    if config.output_dir:
        harness.write_run_outputs(config, record, config.output_dir, raw_config=raw)
    summary = {k: v for k, v in record.summary.items() if k not in ("history", "final_model")}
    print(json.dumps(summary, indent=1, sort_keys=True))
    return EXIT_DIVERGENCE if record.summary.get("diverged") else EXIT_OK


def cmd_run_trajopt(args) -> int:
    config, raw = _load(args)
    result = harness.run_trajopt(config)
    if config.output_dir:
        harness.write_trajopt_outputs(config, result, config.output_dir, raw_config=raw)
    print(
        json.dumps(
            {
                "iterations": len(result.history) - 1,
                "initial_objective": result.history[0]["objective"],
                "final_objective": result.history[-1]["objective"],
                "converged": result.converged,
                "stalled": result.stalled,
            },
            indent=1,
            sort_keys=True,
        )
    )
    return EXIT_OK


def cmd_sparsify_bench(args) -> int:
    config, raw = _load(args)
    table = harness.run_sparsify_bench(config)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["basis", "pool", "mse", "mean_var"])
    for row in table:
        writer.writerow([row["basis"], row["pool"], repr(row["mse"]), repr(row["mean_var"])])
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "sparsify.csv").write_text(buf.getvalue())
        (out / "config.json").write_text(json.dumps(raw, indent=1, sort_keys=True))
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def cmd_fit_gp(args) -> int:
    config, raw = _load(args)
    plant = config.plant
    n_x, n_u = plant.n_x, plant.n_u
    data = np.genfromtxt(args.data, delimiter=",", names=True)
    names = [f"x_{i+1}" for i in range(n_x)] + [f"u_{i+1}" for i in range(n_u)]
    label_names = [f"y_{i+1}" for i in range(n_x)]
    missing = [c for c in names + label_names if c not in (data.dtype.names or ())]
    if missing:
        raise ConfigError(f"data file missing columns {missing}")
    features = np.column_stack([data[c] for c in names])
    labels = np.column_stack([data[c] for c in label_names])
    gp_cfg = config.gp
    if gp_cfg is None:
        raise ConfigError("fit-gp requires a gp section in the config")
    basis = harness.default_basis(
        gp_cfg.basis_variant, gp_cfg.basis_degree, features, config.seed_data
    )
    model = harness.fit_model(
        features,
        labels,
        gp_cfg.kernel,
        basis,
        gp_cfg.theta_prior_scale,
        budget=features.shape[0],
        tune_steps=gp_cfg.tune_steps,
        tune_subset=gp_cfg.tune_subset,
    )
    means = model.predict_mean_many(features)
    variances = model.predict_var_many(features)
    report = {
        "samples": int(features.shape[0]),
        "train_mse": float(np.mean((means - labels) ** 2)),
        "mean_predictive_var": float(np.mean(variances)),
    }
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "gp_checkpoint.json").write_text(sgp.model_to_json(model))
        (out / "fit_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def _monomial_report(n: int, max_extra_dims: int = 3) -> dict:
    """Exactness report of the degree-5 rule in n dimensions."""
    sp = ut5_unit_points(n)

    def normal_moment(powers) -> float:
        out = 1.0
        for p in powers:
            if p % 2 == 1:
                return 0.0
            out *= {0: 1.0, 2: 1.0, 4: 3.0}[p]
        return out

    worst = 0.0
    dims = min(n, max_extra_dims)
    from itertools import product

    for powers in product(range(6), repeat=dims):
        if sum(powers) > 5:
            continue
        full = list(powers) + [0] * (n - dims)
        approx = float(np.sum(sp.weights * np.prod(sp.points ** np.array(full), axis=1)))
        worst = max(worst, abs(approx - normal_moment(full)))
    sixth = float(np.sum(sp.weights * sp.points[:, 0] ** 6)) - 15.0
    return {
        "dim": n,
        "points": sp.count,
        "expected_points": 2 * n * n + 1,
        "weight_sum_error": abs(float(np.sum(sp.weights)) - 1.0),
        "max_moment_error_deg5": worst,
        "x1_sixth_moment_error": sixth,
    }


def cmd_sigma_check(args) -> int:
    report = _monomial_report(args.dim)
    print(json.dumps(report, indent=1, sort_keys=True))
    ok = report["max_moment_error_deg5"] <= 1e-8 and report["points"] == report["expected_points"]
    return EXIT_OK if ok else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualmpc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run-mpc", help="receding-horizon dual-control run")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_run_mpc)

    p = sub.add_parser("run-trajopt", help="single-horizon trajectory optimization")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_run_trajopt)

    p = sub.add_parser("sparsify-bench", help="pool-sparsification study")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_sparsify_bench)

    p = sub.add_parser("fit-gp", help="fit a model to a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_fit_gp)

    p = sub.add_parser("sigma-check", help="sigma-point moment exactness report")
    p.add_argument("--dim", type=int, required=True)
    p.set_defaults(fn=cmd_sigma_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, json.JSONDecodeError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, IllConditionedQError, NotPositiveSemidefiniteError, FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except DivergenceError as err:
        print(f"divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
