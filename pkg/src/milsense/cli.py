"""Command-line frontend for reproducible placement experiments.

Subcommands:

    gen-data      draw a synthetic dataset (optionally with injected
                  simulator error) and write it as manifest + CSV
    design        run a placement strategy over a list of seeds
    evaluate      score a design on held-out time steps
    ablate-noise  sweep injected-error settings against design quality
    compare       optimal-assignment distance between two designs

Every experiment command writes into an append-only run directory named
by the hash of its resolved configuration, so identical invocations are
idempotent and conflicting ones fail loudly. Wall-clock timings go to a
``timings.csv`` sidecar that is exempt from the append-only rule, since
timings are not reproducible. ``MILSENSE_THREADS`` bounds the worker
pool used for seed/cell sweeps.

Exit codes: 0 success, 1 usage, 2 validation, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .datasets import (
    GridConfig,
    GridDataset,
    inject_sim_error,
    load_grid,
    save_grid,
    synth_field,
)
from .design import (
    OptimizerConfig,
    SensorDesign,
    _match_rows,
    imse_design,
    lhs_design,
    load_design,
    mes_design,
    mil_design,
    uniform_design,
)
from .errors import (
    InputError,
    MilsenseError,
    NumericalError,
    OptimizationError,
    ParseError,
)
from .evalsuite import EvalReport, design_distance, evaluate_predictions
from .kernels import (
    Matern32,
    Separable,
    kernel_from_dict,
    kernel_to_dict,
)
from .sparse_vgp import InducingSet
from .stsvgp import (
    PredictiveField,
    StGpModel,
    StPosterior,
    st_elbo,
    st_fit_posterior,
    st_predict,
    test_time_update,
)

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3

__all__ = ["main", "evaluate_design", "fit_design_hyperparameters"]


def _thread_count() -> int:
    raw = os.environ.get("MILSENSE_THREADS")
    if raw is None:
        return min(4, os.cpu_count() or 1)
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"MILSENSE_THREADS must be an integer, got {raw!r}")
    if n < 1:
        raise InputError(f"MILSENSE_THREADS must be >= 1, got {n}")
    return n


# -- run directories --


def _config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]


def _run_dir(out: str, config: dict) -> Path:
    run = Path(out) / _config_hash(config)
    run.mkdir(parents=True, exist_ok=True)
    return run


def _write_text(path: Path, text: str) -> None:
    """Append-only write: identical rewrites are no-ops, conflicts fail."""
    data = text.encode()
    if path.exists():
        if path.read_bytes() == data:
            return
        raise InputError(
            f"run directory already contains a different {path.name}; "
            "outputs are append-only"
        )
    path.write_bytes(data)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    _write_text(path, "\n".join(lines) + "\n")


def _write_timings(path: Path, rows: list[list]) -> None:
    lines = [",".join(["task", "wall (s)"])]
    for row in rows:
        lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


# -- shared argument plumbing --


class _Parser(argparse.ArgumentParser):
    """argparse maps usage errors to exit 2; the documented scheme is 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _parse_ints(text: str, *, what: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated integer list, got {text!r}")


def _parse_floats(text: str, *, what: str) -> list[float]:
    try:
        return [float(part) for part in text.split(",") if part != ""]
    except ValueError:
        raise InputError(f"{what} must be a comma-separated number list, got {text!r}")


def _parse_range(text: str, n_times: int, *, what: str) -> tuple[int, int]:
    parts = text.split(":")
    if len(parts) != 2:
        raise InputError(f"{what} must look like start:stop, got {text!r}")
    try:
        start, stop = int(parts[0]), int(parts[1])
    except ValueError:
        raise InputError(f"{what} must contain integers, got {text!r}")
    if not (0 <= start < stop <= n_times):
        raise InputError(
            f"{what} [{start}, {stop}) is empty or out of bounds for {n_times} steps"
        )
    return start, stop


def _apply_config_file(args: argparse.Namespace) -> None:
    """Config file supplies values for flags left at None; flags win."""
    if getattr(args, "config", None) is None:
        return
    path = Path(args.config)
    try:
        payload = json.loads(path.read_text())
    except FileNotFoundError:
        raise InputError(f"config file {path} does not exist")
    except json.JSONDecodeError as exc:
        raise ParseError(f"config file is not valid JSON: {exc}", path=str(path))
    if not isinstance(payload, dict):
        raise ParseError("config file must hold a JSON object", path=str(path))
    for key, value in payload.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr) or attr in ("config", "func", "command"):
            raise InputError(f"unknown config key {key!r}")
        if getattr(args, attr) is None:
            setattr(args, attr, value)


def _resolve_kernel(arg: str | None, *, span, duration: float):
    """Kernel from inline JSON / file, or a scaled default."""
    if arg is not None:
        text = arg.strip()
        if not text.startswith("{"):
            text = Path(arg).read_text()
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ParseError(f"kernel spec is not valid JSON: {exc}")
        return kernel_from_dict(payload)
    spatial = Matern32(1.0, [0.15 * s for s in span])
    temporal = Matern32(1.0, [max(duration * 0.05, 1e-6)])
    return Separable(spatial, temporal)


def _data_span(data: GridDataset):
    grid = data.spatial_locations
    raw = grid.max(axis=0) - grid.min(axis=0)
    span = [float(s) if s > 0 else 1.0 for s in raw]
    duration = float(data.times[-1] - data.times[0]) if data.n_times > 1 else 1.0
    return span, duration


def _resolve_sigma2(arg: float | None, data: GridDataset) -> float:
    if arg is not None:
        if arg <= 0:
            raise InputError(f"sigma2 must be positive, got {arg}")
        return float(arg)
    observed = data.values[data.mask]
    if observed.size == 0:
        raise InputError("dataset has no observed values")
    return max(0.05 * float(np.var(observed)), 1e-6)


def _optimizer_config(args: argparse.Namespace, seed: int) -> OptimizerConfig:
    return OptimizerConfig(
        max_iters=args.max_iters if args.max_iters is not None else 500,
        restarts=args.restarts if args.restarts is not None else 3,
        lr_init=args.lr if args.lr is not None else 0.05,
        lr_final=args.lr_final if args.lr_final is not None else 0.001,
        seed=seed,
        fit_hyperparameters=(
            args.fit_hypers if getattr(args, "fit_hypers", None) is not None else True
        ),
        check_gradient=bool(getattr(args, "check_grad", False)),
    )


def _add_optimizer_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--max-iters", type=int, default=None, help="ascent iterations (500)")
    sub.add_argument("--restarts", type=int, default=None, help="random restarts (3)")
    sub.add_argument("--lr", type=float, default=None, help="initial step size (0.05)")
    sub.add_argument("--lr-final", type=float, default=None, help="final step size (0.001)")


def _add_common_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", default=None, help="JSON file with flag defaults")
    sub.add_argument("--kernel", default=None, help="kernel spec: JSON string or file")
    sub.add_argument("--sigma2", type=float, default=None, help="observation noise variance")


# -- evaluation pipeline shared by evaluate / ablate-noise / tests --


def fit_design_hyperparameters(
    train: GridDataset,
    kernel: Separable,
    design_locations: np.ndarray,
    sigma2: float,
    config: OptimizerConfig,
) -> tuple[Separable, float, float]:
    """Hyperparameters by bound ascent with the design as fixed inducing set."""
    n = np.atleast_2d(np.asarray(design_locations)).shape[0]
    _, fit = mil_design(
        train, kernel, n, fixed=design_locations, sigma2=sigma2, config=config
    )
    return fit.model.kernel, fit.model.sigma2, fit.elbo


def evaluate_design(
    data: GridDataset,
    design_locations: np.ndarray,
    kernel: Separable,
    sigma2: float,
    train_range: tuple[int, int],
    test_range: tuple[int, int],
    *,
    reuse: str = "auto",
    extreme_threshold: float | None = None,
) -> tuple[EvalReport, PredictiveField, GridDataset]:
    """Fit on the training window, observe the design on the test window,
    predict the full grid, and score against the held-out values."""
    design_locations = np.atleast_2d(np.asarray(design_locations, dtype=float))
    indices = _match_rows(
        data.spatial_locations, design_locations, what="design location"
    )
    train = data.window(*train_range)
    test = data.window(*test_range)

    inducing = InducingSet(data.spatial_locations[indices])
    model_train = StGpModel(
        kernel=kernel,
        inducing=inducing,
        spatial_grid=data.spatial_locations,
        time_grid=train.times,
        sigma2=sigma2,
    )
    trained = st_fit_posterior(model_train, train)

    model_test = StGpModel(
        kernel=kernel,
        inducing=inducing,
        spatial_grid=data.spatial_locations,
        time_grid=test.times,
        sigma2=sigma2,
    )
    updated = test_time_update(
        model_test,
        trained,
        data.spatial_locations[indices],
        test.values[:, indices],
        test.mask[:, indices],
        reuse=reuse,
    )
    pred = st_predict(model_test, updated, data.spatial_locations)

    if extreme_threshold is None:
        observed = test.values[test.mask]
        extreme_threshold = 2.0 * float(np.std(observed)) if observed.size else 1.0
    report = evaluate_predictions(
        pred.mean,
        pred.var,
        test.values,
        test.mask,
        extreme_threshold=extreme_threshold,
        metadata={
            "n_sensors": int(indices.size),
            "train_range": list(train_range),
            "test_range": list(test_range),
        },
    )
    return report, pred, test


# -- gen-data --


def cmd_gen_data(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    side = math.isqrt(args.ns)
    if side * side != args.ns:
        raise InputError(f"--ns must be a perfect square for a square grid, got {args.ns}")
    dt = args.dt if args.dt is not None else 1.0
    grid_config = GridConfig(nx=side, ny=side, n_times=args.nt, dt=dt)
    kernel = _resolve_kernel(args.kernel, span=[1.0, 1.0], duration=args.nt * dt)
    obs_noise = args.obs_noise if args.obs_noise is not None else 0.0
    dataset = synth_field(args.kind, grid_config, kernel, args.seed, obs_noise=obs_noise)
    if args.noise_var is not None:
        dataset = inject_sim_error(
            dataset,
            ell_s=args.noise_ell_s if args.noise_ell_s is not None else 0.1,
            ell_t=args.noise_ell_t if args.noise_ell_t is not None else 1.0,
            var=args.noise_var,
            seed=args.noise_seed if args.noise_seed is not None else 0,
        )
    save_grid(dataset, args.out)
    lo, hi = float(dataset.values.min()), float(dataset.values.max())
    print(f"dataset: kind={args.kind} n_locations={dataset.n_locations} "
          f"n_times={dataset.n_times}")
    print(f"values in [{lo:.4f}, {hi:.4f}] (value units), written to {args.out}")
    return 0


# -- design --


def _design_config(args: argparse.Namespace) -> dict:
    return {
        "command": "design",
        "data": str(args.data),
        "strategy": args.strategy,
        "n": args.n,
        "seeds": args.seeds,
        "kernel": args.kernel,
        "sigma2": args.sigma2,
        "fixed": str(args.fixed) if args.fixed else None,
        "init": str(args.init) if args.init else None,
        "max_iters": args.max_iters,
        "restarts": args.restarts,
        "lr": args.lr,
        "lr_final": args.lr_final,
        "fit_hypers": args.fit_hypers,
        "check_grad": args.check_grad,
    }


def _run_one_design(
    args: argparse.Namespace,
    data: GridDataset,
    kernel: Separable,
    sigma2: float,
    seed: int,
):
    start = time.perf_counter()
    cfg = _optimizer_config(args, seed)
    fit_payload = None
    if args.strategy == "uniform":
        design = uniform_design(data.spatial_locations, args.n, seed)
        objective = _static_elbo(data, kernel, sigma2, design)
    elif args.strategy == "lhs":
        design = lhs_design(data.spatial_locations, args.n, seed)
        objective = _static_elbo(data, kernel, sigma2, design)
    elif args.strategy == "mil":
        fixed = load_design(args.fixed).locations if args.fixed else None
        design, fit = mil_design(
            data, kernel, args.n, fixed=fixed, sigma2=sigma2, config=cfg
        )
        objective = fit.elbo
        fit_payload = {
            "elbo": fit.elbo,
            "sigma2": fit.model.sigma2,
            "kernel": kernel_to_dict(fit.model.kernel),
            "provenance": {
                k: v for k, v in fit.provenance.items() if not isinstance(v, np.ndarray)
            },
        }
    elif args.strategy == "mes":
        if not args.init:
            raise InputError("--strategy mes needs --init with the existing design")
        init = load_design(args.init).locations
        design, info = mes_design(data, kernel, args.n, init, sigma2=sigma2, config=cfg)
        objective = info["objective"]
    elif args.strategy == "imse":
        if not args.init:
            raise InputError("--strategy imse needs --init with the existing design")
        init = load_design(args.init).locations
        design, info = imse_design(data, kernel, args.n, init, sigma2=sigma2, config=cfg)
        objective = -info["integrated_variance"]
    else:
        raise InputError(f"unknown strategy {args.strategy!r}")
    wall = time.perf_counter() - start
    return seed, design, objective, fit_payload, wall


def _static_elbo(
    data: GridDataset, kernel: Separable, sigma2: float, design: SensorDesign
) -> float:
    model = StGpModel(
        kernel=kernel,
        inducing=InducingSet(design.locations),
        spatial_grid=data.spatial_locations,
        time_grid=data.times,
        sigma2=sigma2,
    )
    return st_elbo(model, data)


def cmd_design(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    args.seeds = args.seeds if args.seeds is not None else "0"
    data = load_grid(args.data)
    span, duration = _data_span(data)
    kernel = _resolve_kernel(args.kernel, span=span, duration=duration)
    sigma2 = _resolve_sigma2(args.sigma2, data)
    seeds = _parse_ints(args.seeds, what="--seeds")
    if not seeds:
        raise InputError("--seeds must name at least one seed")

    config = _design_config(args)
    run = _run_dir(args.out, config)
    _write_text(run / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n")

    with ThreadPoolExecutor(max_workers=_thread_count()) as pool:
        results = list(
            pool.map(
                lambda s: _run_one_design(args, data, kernel, sigma2, s), seeds
            )
        )
    results.sort(key=lambda r: r[0])

    rows, timing_rows = [], []
    for seed, design, objective, fit_payload, wall in results:
        _write_text(run / f"design-seed{seed}.json", design.to_json() + "\n")
        if fit_payload is not None:
            _write_text(
                run / f"fit-seed{seed}.json",
                json.dumps(fit_payload, indent=2, sort_keys=True) + "\n",
            )
        rows.append([seed, args.strategy, design.n_sensors, float(objective)])
        timing_rows.append([f"seed{seed}", f"{wall:.3f}"])
    _write_csv(
        run / "summary.csv",
        ["seed", "strategy", "n_sensors", "objective (nats)"],
        rows,
    )
    _write_timings(run / "timings.csv", timing_rows)

    print(f"run directory: {run}")
    for seed, _, objective, _, wall in results:
        print(f"seed {seed}: objective {objective:.4f} ({wall:.1f}s)")
    return 0


# -- evaluate --


def _evaluate_config(args: argparse.Namespace) -> dict:
    return {
        "command": "evaluate",
        "data": str(args.data),
        "design": str(args.design),
        "train_range": args.train_range,
        "test_range": args.test_range,
        "kernel": args.kernel,
        "sigma2": args.sigma2,
        "hypers": str(args.hypers) if args.hypers else None,
        "plot_locations": args.plot_locations,
        "compare": str(args.compare) if args.compare else None,
        "reuse": args.reuse,
        "extreme_threshold": args.extreme_threshold,
        "max_iters": args.max_iters,
        "restarts": args.restarts,
        "lr": args.lr,
        "lr_final": args.lr_final,
    }


def cmd_evaluate(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    args.reuse = args.reuse if args.reuse is not None else "auto"
    data = load_grid(args.data)
    design = load_design(args.design)
    train_range = _parse_range(args.train_range, data.n_times, what="--train-range")
    test_range = _parse_range(args.test_range, data.n_times, what="--test-range")
    span, duration = _data_span(data)
    sigma2 = _resolve_sigma2(args.sigma2, data)

    start = time.perf_counter()
    if args.hypers:
        payload = json.loads(Path(args.hypers).read_text())
        kernel = kernel_from_dict(payload["kernel"])
        sigma2 = float(payload["sigma2"])
    else:
        kernel0 = _resolve_kernel(args.kernel, span=span, duration=duration)
        args_fit = argparse.Namespace(
            max_iters=args.max_iters, restarts=1 if args.restarts is None else args.restarts,
            lr=args.lr, lr_final=args.lr_final, fit_hypers=True, check_grad=False,
        )
        kernel, sigma2, _ = fit_design_hyperparameters(
            data.window(*train_range),
            kernel0,
            design.locations,
            sigma2,
            _optimizer_config(args_fit, 0),
        )

    report, pred, test = evaluate_design(
        data,
        design.locations,
        kernel,
        sigma2,
        train_range,
        test_range,
        reuse=args.reuse,
        extreme_threshold=args.extreme_threshold,
    )
    wall = time.perf_counter() - start

    config = _evaluate_config(args)
    run = _run_dir(args.out, config)
    _write_text(run / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n")
    _write_text(run / "report.json", report.to_json() + "\n")

    grid = data.spatial_locations
    per_loc_err = np.where(test.mask, pred.mean - test.values, np.nan)
    with np.errstate(invalid="ignore"):
        rmse_loc = np.sqrt(np.nanmean(per_loc_err**2, axis=0))
    _write_csv(
        run / "rmse-per-location.csv",
        ["x1 (grid units)", "x2 (grid units)", "rmse (value units)"],
        [[float(grid[i, 0]), float(grid[i, 1]), float(rmse_loc[i])] for i in range(grid.shape[0])],
    )
    _write_csv(
        run / "calibration.csv",
        ["level (probability)", "empirical coverage (fraction)"],
        [[float(a), float(b)] for a, b in report.calibration_curve],
    )
    _write_csv(
        run / "extreme-error-map.csv",
        ["x1 (grid units)", "x2 (grid units)", "rate (fraction)"],
        [
            [float(grid[i, 0]), float(grid[i, 1]), float(report.extreme_error_rate[i])]
            for i in range(grid.shape[0])
        ],
    )
    if args.plot_locations:
        for idx in _parse_ints(args.plot_locations, what="--plot-locations"):
            if not 0 <= idx < grid.shape[0]:
                raise InputError(f"--plot-locations index {idx} out of range")
            _write_csv(
                run / f"series-loc{idx}.csv",
                ["t (steps)", "truth (value units)", "mean (value units)", "sd (value units)"],
                [
                    [
                        float(test.times[t]),
                        float(test.values[t, idx]),
                        float(pred.mean[t, idx]),
                        float(np.sqrt(pred.var[t, idx])),
                    ]
                    for t in range(test.n_times)
                ],
            )
    if args.compare:
        other = load_design(args.compare)
        match = design_distance(design.locations, other.locations)
        _write_text(
            run / "compare.json",
            json.dumps(
                {
                    "total_distance": match.total_distance,
                    "pairs": [list(p) for p in match.pairs],
                    "unmatched": list(match.unmatched) if match.unmatched else None,
                    "most_displaced": list(match.most_displaced)
                    if match.most_displaced
                    else None,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n",
        )
    _write_timings(run / "timings.csv", [["evaluate", f"{wall:.3f}"]])

    print(f"run directory: {run}")
    print(
        f"rmse {report.rmse:.4f} npll {report.npll:.4f} "
        f"miscalibration area {report.miscalibration_area:.4f} "
        f"({report.n_evaluated} observations)"
    )
    return 0


# -- ablate-noise --


def _ablate_config(args: argparse.Namespace) -> dict:
    return {
        "command": "ablate-noise",
        "data": str(args.data),
        "n": args.n,
        "ell_s": args.ell_s,
        "ell_t": args.ell_t,
        "vars": args.vars,
        "seeds": args.seeds,
        "train_range": args.train_range,
        "test_range": args.test_range,
        "kernel": args.kernel,
        "sigma2": args.sigma2,
        "max_iters": args.max_iters,
        "restarts": args.restarts,
        "lr": args.lr,
        "lr_final": args.lr_final,
    }


def run_noise_ablation(
    data: GridDataset,
    kernel0: Separable,
    sigma2_0: float,
    n_sensors: int,
    ell_s_values: list[float],
    ell_t_values: list[float],
    var_values: list[float],
    seeds: list[int],
    train_range: tuple[int, int],
    test_range: tuple[int, int],
    config: OptimizerConfig,
    threads: int = 1,
) -> tuple[list[dict], dict]:
    """Golden hyperparameters from clean data, then one MIL run per
    (ell_s, ell_t, var, seed) on error-injected training data, scored on
    the clean dataset. Returns long-format rows and the golden fit."""
    train = data.window(*train_range)
    _, golden_fit = mil_design(
        train, kernel0, n_sensors, sigma2=sigma2_0, config=config
    )
    golden_kernel = golden_fit.model.kernel
    golden_sigma2 = golden_fit.model.sigma2
    location_config = OptimizerConfig(
        max_iters=config.max_iters,
        restarts=1,
        lr_init=config.lr_init,
        lr_final=config.lr_final,
        seed=config.seed,
        fit_hyperparameters=False,
    )

    def one(task):
        ell_s, ell_t, var, seed = task
        corrupted = inject_sim_error(train, ell_s=ell_s, ell_t=ell_t, var=var, seed=seed)
        cfg = OptimizerConfig(
            max_iters=location_config.max_iters,
            restarts=1,
            lr_init=location_config.lr_init,
            lr_final=location_config.lr_final,
            seed=seed,
            fit_hyperparameters=False,
        )
        design, _ = mil_design(
            corrupted, golden_kernel, n_sensors, sigma2=golden_sigma2, config=cfg
        )
        report, _, _ = evaluate_design(
            data,
            design.locations,
            golden_kernel,
            golden_sigma2,
            train_range,
            test_range,
        )
        return {
            "ell_s": ell_s,
            "ell_t": ell_t,
            "var": var,
            "seed": seed,
            "rmse": report.rmse,
            "npll": report.npll,
        }

    tasks = [
        (ell_s, ell_t, var, seed)
        for ell_s in ell_s_values
        for ell_t in ell_t_values
        for var in var_values
        for seed in seeds
    ]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(one, tasks))
    rows.sort(key=lambda r: (r["ell_s"], r["ell_t"], r["var"], r["seed"]))
    golden = {
        "kernel": kernel_to_dict(golden_kernel),
        "sigma2": golden_sigma2,
        "elbo": golden_fit.elbo,
    }
    return rows, golden


def cmd_ablate_noise(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    args.ell_s = args.ell_s if args.ell_s is not None else "0.1,1.0"
    args.ell_t = args.ell_t if args.ell_t is not None else "1.0,36.0"
    args.vars = args.vars if args.vars is not None else "0.0,0.3,1.0"
    args.seeds = args.seeds if args.seeds is not None else "0,1,2,3,4,5,6,7,8,9"
    data = load_grid(args.data)
    train_range = _parse_range(args.train_range, data.n_times, what="--train-range")
    test_range = _parse_range(args.test_range, data.n_times, what="--test-range")
    span, duration = _data_span(data)
    kernel0 = _resolve_kernel(args.kernel, span=span, duration=duration)
    sigma2_0 = _resolve_sigma2(args.sigma2, data)
    ell_s_values = _parse_floats(args.ell_s, what="--ell-s")
    ell_t_values = _parse_floats(args.ell_t, what="--ell-t")
    var_values = _parse_floats(args.vars, what="--vars")
    seeds = _parse_ints(args.seeds, what="--seeds")
    if not (ell_s_values and ell_t_values and var_values and seeds):
        raise InputError("ablation needs non-empty --ell-s, --ell-t, --vars, --seeds")

    config = _ablate_config(args)
    run = _run_dir(args.out, config)
    _write_text(run / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n")

    start = time.perf_counter()
    rows, golden = run_noise_ablation(
        data,
        kernel0,
        sigma2_0,
        args.n,
        ell_s_values,
        ell_t_values,
        var_values,
        seeds,
        train_range,
        test_range,
        _optimizer_config(args, seeds[0]),
        threads=_thread_count(),
    )
    wall = time.perf_counter() - start

    _write_text(run / "golden.json", json.dumps(golden, indent=2, sort_keys=True) + "\n")
    _write_csv(
        run / "results.csv",
        [
            "ell_s (normalized)",
            "ell_t (time units)",
            "var (value units^2)",
            "seed",
            "rmse (value units)",
            "npll (nats)",
        ],
        [[r["ell_s"], r["ell_t"], r["var"], r["seed"], r["rmse"], r["npll"]] for r in rows],
    )

    summary_rows = []
    for ell_s in ell_s_values:
        for ell_t in ell_t_values:
            for var in var_values:
                cell = [
                    r
                    for r in rows
                    if r["ell_s"] == ell_s and r["ell_t"] == ell_t and r["var"] == var
                ]
                rmses = np.asarray([r["rmse"] for r in cell])
                nplls = np.asarray([r["npll"] for r in cell])
                summary_rows.append(
                    [
                        ell_s,
                        ell_t,
                        var,
                        float(rmses.mean()),
                        float(rmses.std(ddof=1)) if rmses.size > 1 else 0.0,
                        float(nplls.mean()),
                        float(nplls.std(ddof=1)) if nplls.size > 1 else 0.0,
                        len(cell),
                    ]
                )
    _write_csv(
        run / "summary.csv",
        [
            "ell_s (normalized)",
            "ell_t (time units)",
            "var (value units^2)",
            "mean rmse (value units)",
            "sd rmse (value units)",
            "mean npll (nats)",
            "sd npll (nats)",
            "n_seeds",
        ],
        summary_rows,
    )
    _write_timings(run / "timings.csv", [["ablate-noise", f"{wall:.3f}"]])

    print(f"run directory: {run}")
    print(f"{len(rows)} runs in {wall:.1f}s")
    return 0


# -- compare --


def cmd_compare(args: argparse.Namespace) -> int:
    _apply_config_file(args)
    a = load_design(args.design_a)
    b = load_design(args.design_b)
    match = design_distance(a.locations, b.locations)
    payload = {
        "total_distance": match.total_distance,
        "pairs": [list(p) for p in match.pairs],
        "unmatched": list(match.unmatched) if match.unmatched else None,
        "most_displaced": list(match.most_displaced) if match.most_displaced else None,
    }
    if args.out:
        config = {
            "command": "compare",
            "design_a": str(args.design_a),
            "design_b": str(args.design_b),
        }
        run = _run_dir(args.out, config)
        _write_text(
            run / "config.json", json.dumps(config, indent=2, sort_keys=True) + "\n"
        )
        _write_text(
            run / "compare.json", json.dumps(payload, indent=2, sort_keys=True) + "\n"
        )
        print(f"run directory: {run}")
    print(f"total distance {match.total_distance:.6f} (grid units)")
    if match.most_displaced is not None:
        print(f"most displaced pair: {match.most_displaced}")
    if match.unmatched is not None:
        print(f"unmatched: design {match.unmatched[0]} row {match.unmatched[1]}")
    return 0


# -- entry point --


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="milsense",
        description="sensor placement by minimum information loss",
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="draw a synthetic dataset")
    p.add_argument("--kind", required=True, choices=["separable_gp", "two_regime"])
    p.add_argument("--ns", required=True, type=int, help="grid size (perfect square)")
    p.add_argument("--nt", required=True, type=int, help="number of time steps")
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--dt", type=float, default=None, help="step length (1.0)")
    p.add_argument("--obs-noise", type=float, default=None, help="observation noise sd (0)")
    p.add_argument("--noise-var", type=float, default=None, help="injected error variance")
    p.add_argument("--noise-ell-s", type=float, default=None)
    p.add_argument("--noise-ell-t", type=float, default=None)
    p.add_argument("--noise-seed", type=int, default=None)
    _add_common_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("design", help="run a placement strategy")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument(
        "--strategy", required=True, choices=["mil", "uniform", "lhs", "mes", "imse"]
    )
    p.add_argument("--n", required=True, type=int, help="sensors to place (or to add)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (0)")
    p.add_argument("--out", required=True, help="output parent directory")
    p.add_argument("--fixed", default=None, help="design JSON with fixed locations (mil)")
    p.add_argument("--init", default=None, help="design JSON with existing sensors (mes/imse)")
    p.add_argument(
        "--fit-hypers",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="fit hyperparameters jointly (default on)",
    )
    p.add_argument("--check-grad", action="store_true", default=False)
    _add_optimizer_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("evaluate", help="score a design on held-out steps")
    p.add_argument("--data", required=True)
    p.add_argument("--design", required=True, help="design JSON")
    p.add_argument("--train-range", required=True, help="start:stop (steps)")
    p.add_argument("--test-range", required=True, help="start:stop (steps)")
    p.add_argument("--out", required=True)
    p.add_argument("--hypers", default=None, help="fit JSON from a mil design run")
    p.add_argument("--plot-locations", default=None, help="comma-separated grid indices")
    p.add_argument("--compare", default=None, help="second design JSON to diff against")
    p.add_argument("--reuse", default=None, choices=["auto", "per-step", "averaged"])
    p.add_argument("--extreme-threshold", type=float, default=None)
    _add_optimizer_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-noise", help="sweep injected simulator error")
    p.add_argument("--data", required=True)
    p.add_argument("--n", required=True, type=int, help="sensors per run")
    p.add_argument("--out", required=True)
    p.add_argument("--train-range", required=True)
    p.add_argument("--test-range", required=True)
    p.add_argument("--ell-s", default=None, help="comma list (0.1,1.0)")
    p.add_argument("--ell-t", default=None, help="comma list (1.0,36.0)")
    p.add_argument("--vars", default=None, help="comma list (0.0,0.3,1.0)")
    p.add_argument("--seeds", default=None, help="comma list (0..9)")
    _add_optimizer_flags(p)
    _add_common_flags(p)
    p.set_defaults(func=cmd_ablate_noise)

    p = sub.add_parser("compare", help="distance between two designs")
    p.add_argument("--design-a", required=True)
    p.add_argument("--design-b", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--config", default=None, help="JSON file with flag defaults")
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (InputError, ParseError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, OptimizationError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except MilsenseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
