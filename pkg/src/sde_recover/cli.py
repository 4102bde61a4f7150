"""Command-line entry point.

Every subcommand reads an optional TOML or JSON config file, applies flag
overrides on top of it, and writes its artifacts into ``--out``. JSON
artifacts embed the effective config under ``"config"``; CSV artifacts carry
it on a leading ``# config: {...}`` comment line.

Exit codes: 0 success, 2 config or input error, 3 simulation failure,
4 optimization failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from . import __version__
from .benchmark import BenchmarkSearch, fit_benchmark, predict_benchmark
from .estimator import FitConfig, NonFiniteLossError, fit, fit_multivariate
from .evaluation import (ExperimentSpec, reference_suite, rows_to_table_csv, run_experiment,
                         time_discretization_sweep, write_json)
from .hyperlearn import CvConfig, learn_hyperparams
from .kernels import MATERN52, HyperParams, default_hyperparams
from .numerics import FactorizationError
from .simulate import (NonFiniteStateError, ProcessSpec, euler_maruyama, to_observations,
                       trajectory_from_csv, trajectory_to_csv)

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

log = logging.getLogger("sde_recover")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SIMULATION = 3
EXIT_OPTIMIZATION = 4

N_PLOT_POINTS = 200


class ConfigError(ValueError):
    pass


# --- config plumbing ---------------------------------------------------------------

def load_config(path: str | None, section: str) -> dict:
    """Read ``path`` (TOML or JSON). A table named ``section`` wins over the top level."""
    if path is None:
        return {}
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if p.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a table/object")
    if isinstance(data.get(section), dict):
        return dict(data[section])
    return data


def _parse_scalar(text: str) -> Any:
    try:
        return json.loads(text)
    except ValueError:
        return text


def _key_values(pairs: Sequence[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"expected KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_scalar(value.strip())
    return out


def _overlay(base: Mapping, **flags) -> dict:
    """Copy of ``base`` with every non-None flag written over it."""
    out = dict(base)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _header_line(config: Mapping) -> str:
    return "# config: " + json.dumps(config, sort_keys=True, default=_plain) + "\n"


def _plain(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _write_csv(path: Path, header: Sequence[str], rows, config: Mapping):
    buf = io.StringIO()
    buf.write(_header_line(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build(fn, *args, **kwargs):
    """Run a config constructor, turning schema errors into :class:`ConfigError`."""
    try:
        return fn(*args, **kwargs)
    except (TypeError, KeyError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


# --- simulate ---------------------------------------------------------------------

def _process_from(cfg: Mapping, args) -> ProcessSpec:
    proc = dict(cfg.get("process", {}))
    if args.process is not None:
        proc["family"] = args.process
    params = dict(proc.get("params", {}))
    params.update(_key_values(args.param))
    if "family" not in proc:
        raise ConfigError("no process family given (config [process] or --process)")
    return _build(ProcessSpec, proc["family"], params)


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, "simulate")
    process = _process_from(cfg, args)
    eff = _overlay(cfg, x0=args.x0, dt=args.dt, n_steps=args.n_steps, seed=args.seed)
    eff.setdefault("x0", 0.0)
    eff.setdefault("seed", 0)
    for key in ("dt", "n_steps"):
        if key not in eff:
            raise ConfigError(f"missing {key!r}")
    eff["process"] = process.to_dict()
    try:
        traj = euler_maruyama(process, float(eff["x0"]), float(eff["dt"]), int(eff["n_steps"]),
                              int(eff["seed"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    out = _out_dir(args)
    path = out / "trajectory.csv"
    path.write_text(_header_line(eff) + trajectory_to_csv(traj))
    write_json({"config": eff, "seed": eff["seed"], "n_points": len(traj)},
               out / "simulate.json")
    print(f"wrote {path}: N={len(traj)} range=[{np.min(traj.values):.6g}, "
          f"{np.max(traj.values):.6g}] seed={eff['seed']}")
    return EXIT_OK


# --- fit / learn ----------------------------------------------------------------------

def _read_observations(path: str):
    try:
        traj = trajectory_from_csv(path)
    except OSError as exc:
        raise ConfigError(f"cannot read trajectory {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"bad trajectory file {path}: {exc}") from exc
    return to_observations(traj)


def _hyperparams_from(cfg: Mapping, args, obs) -> HyperParams:
    if args.hyperparams is not None:
        data = json.loads(Path(args.hyperparams).read_text())
        data = data.get("hyperparams", data)
        return _build(HyperParams.from_dict, data)
    if "hyperparams" in cfg:
        return _build(HyperParams.from_dict, cfg["hyperparams"])
    drift = args.drift_family or cfg.get("drift_family", MATERN52)
    vol = args.vol_family or cfg.get("vol_family", MATERN52)
    lam = args.lam if args.lam is not None else cfg.get("lam")
    gamma = args.gamma if args.gamma is not None else cfg.get("gamma", 1e-4)
    return _build(default_hyperparams, obs.X, obs.dt, drift, vol, lam=lam, gamma=gamma)


def _fit_config_from(cfg: Mapping, args, hp: HyperParams) -> FitConfig:
    fields = _overlay(cfg.get("fit", {}), optimizer=args.optimizer,
                      gd_max_iters=args.gd_max_iters)
    return _build(FitConfig, hp=hp, **fields)


def _effective(fit_config: FitConfig, cfg: Mapping, args, **extra) -> dict:
    return {"fit": fit_config.to_dict(), "trajectory": str(args.trajectory),
            "seed": args.seed if args.seed is not None else cfg.get("seed", 0), **extra}


def cmd_fit(args) -> int:
    cfg = load_config(args.config, "fit")
    obs = _read_observations(args.trajectory)
    hp = _hyperparams_from(cfg, args, obs)
    config = _fit_config_from(cfg, args, hp)
    eff = _effective(config, cfg, args)
    results = fit_multivariate(obs, config) if np.ndim(obs.Y) == 2 else [fit(obs, config)]
    out = _out_dir(args)
    payload = {"config": eff, "seed": eff["seed"],
               "results": [r.to_dict(include_trace=args.trace) for r in results]}
    write_json(payload, out / "fit.json")
    xcols = ["x"] if np.ndim(obs.X) == 1 else [f"x{i + 1}" for i in range(obs.X.shape[1])]
    X2 = np.asarray(obs.X).reshape(len(obs), -1)
    header, cols = list(xcols), [X2[:, j] for j in range(X2.shape[1])]
    for i, r in enumerate(results):
        suffix = "" if len(results) == 1 else str(i + 1)
        header += [f"f_bar{suffix}", f"sigma_bar{suffix}", f"sigma_dagger{suffix}"]
        cols += [r.f_bar, r.sigma_bar, r.sigma_dagger]
    _write_csv(out / "predictions.csv", header, zip(*cols), eff)
    if args.plot_data and X2.shape[1] == 1:
        grid = np.linspace(X2.min(), X2.max(), N_PLOT_POINTS)
        post = results[0].predict_drift(grid)
        _write_csv(out / "plot_data.csv", ["x", "drift_mean", "drift_variance", "sigma"],
                   zip(grid, post.mean, post.variance, results[0].predict_sigma(grid)), eff)
    for i, r in enumerate(results):
        print(f"dim {i}: loss {r.loss_trace[0]:.6g} -> {r.final_loss:.6g} after "
              f"{r.iterations} iterations ({r.stop_reason})")
    return EXIT_OK


def cmd_learn(args) -> int:
    cfg = load_config(args.config, "learn")
    obs = _read_observations(args.trajectory)
    if np.ndim(obs.Y) == 2:
        raise ConfigError("learn takes a one-dimensional trajectory")
    hp = _hyperparams_from(cfg, args, obs)
    config = _fit_config_from(cfg, args, hp)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    cv_fields = dict(CvConfig.for_optimizer(config.optimizer).to_dict())
    cv_fields.update(cfg.get("cv", {}))
    cv_fields = _overlay(cv_fields, budget=args.budget, m_partitions=args.partitions, seed=seed)
    cv = _build(CvConfig.from_dict, cv_fields)
    eff = _effective(config, cfg, args, cv=cv.to_dict(), seed=seed)
    result = learn_hyperparams(obs, cv, config)
    out = _out_dir(args)
    write_json({"config": eff, "seed": seed, "hyperparams": result.hp.to_dict(),
                "best_objective": min(e.value for e in result.history),
                "default_objective": result.default_objective,
                "labels": result.search_space.labels}, out / "hyperparams.json")
    header = ["iter", *result.search_space.labels, "objective", "raw_objective", "stage"]
    rows = ([i, *e.x.tolist(), e.value, e.raw, e.stage] for i, e in enumerate(result.history))
    _write_csv(out / "history.csv", header, rows, eff)
    print(f"best CV objective {min(e.value for e in result.history):.6g} "
          f"(default {result.default_objective:.6g}) over {len(result.history)} evaluations")
    return EXIT_OK


# --- benchmark --------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    cfg = load_config(args.config, "benchmark")
    obs = _read_observations(args.trajectory)
    if np.ndim(obs.Y) == 2:
        raise ConfigError("benchmark takes a one-dimensional trajectory")
    family = args.family or cfg.get("family", MATERN52)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    search = _build(BenchmarkSearch.from_dict,
                    _overlay(cfg.get("search", {}), budget=args.budget, seed=seed))
    eff = {"family": family, "search": search.to_dict(), "seed": seed,
           "trajectory": str(args.trajectory)}
    model = fit_benchmark(obs.X, obs.Y, family, search)
    pred = predict_benchmark(model, obs.X, obs.dt)
    out = _out_dir(args)
    write_json({"config": eff, "seed": seed, "model": model.to_dict()}, out / "benchmark.json")
    _write_csv(out / "predictions.csv", ["x", "drift", "volatility"],
               zip(obs.X, pred.drift, pred.volatility), eff)
    if args.plot_data:
        grid = np.linspace(np.min(obs.X), np.max(obs.X), N_PLOT_POINTS)
        g = predict_benchmark(model, grid, obs.dt)
        _write_csv(out / "plot_data.csv", ["x", "drift", "volatility", "predictive_volatility"],
                   zip(grid, g.drift, g.volatility, g.predictive_volatility), eff)
    print(f"noise level c={model.noise_level:.6g}, volatility "
          f"{pred.volatility[0]:.6g}, objective {model.nll:.6g}")
    return EXIT_OK


# --- evaluate / sweep -----------------------------------------------------------------------

def _spec_overrides(args) -> dict:
    out = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "n", None) is not None:
        out["n_train"] = out["n_test"] = args.n
    if getattr(args, "gd_max_iters", None) is not None:
        out["gd_max_iters"] = args.gd_max_iters
    return out


def _apply(spec: ExperimentSpec, overrides: Mapping) -> ExperimentSpec:
    ov = dict(overrides)
    gd = ov.pop("gd_max_iters", None)
    if gd is not None:
        ov["fit_config"] = {**dict(spec.fit_config), "gd_max_iters": gd}
    return spec.replace(**ov)


def _specs_from(cfg: Mapping) -> list[ExperimentSpec]:
    if "experiments" in cfg:
        return [_build(ExperimentSpec.from_dict, e) for e in cfg["experiments"]]
    if "process" not in cfg:
        raise ConfigError("experiment config needs [process] or [[experiments]]")
    return [_build(ExperimentSpec.from_dict, cfg)]


def _public_rows(rows):
    return [{k: v for k, v in r.to_dict().items() if k != "runtime_seconds"} for r in rows]


def _write_timings(path: Path, labelled_rows):
    _write_csv(path, ["label", "k", "method", "runtime_seconds"],
               ([lab, r.k, r.method, r.runtime_seconds] for lab, r in labelled_rows), {})


def _write_plot_data(out: Path, label: str, result, k=None):
    pdir = out / "plot_data"
    pdir.mkdir(exist_ok=True)
    tag = label if k is None else f"{label}_k{k}"
    for method, pred in result.predictions.items():
        pred.to_csv(pdir / f"{tag}_{method}.csv")


def cmd_evaluate(args) -> int:
    overrides = _spec_overrides(args)
    if args.reference_suite:
        n = overrides.pop("n_train", 300)
        overrides.pop("n_test", None)
        specs = [_apply(s, overrides) for s in reference_suite(n=n)]
    else:
        if args.config is None:
            raise ConfigError("evaluate needs --config or --reference-suite")
        specs = [_apply(s, overrides) for s in _specs_from(load_config(args.config, "evaluate"))]
    out = _out_dir(args)
    labelled, cells = [], []
    for i, spec in enumerate(specs):
        label = spec.label or f"{spec.process.family}_{i}"
        res = run_experiment(spec)
        labelled += [(label, r) for r in res.rows]
        cells.append({"label": label, "experiment": spec.to_dict(),
                      "rows": _public_rows(res.rows), "hyperparams": res.hyperparams})
        if args.plot_data:
            _write_plot_data(out, label, res)
    eff = {"experiments": [s.to_dict() for s in specs], "reference_suite": bool(args.reference_suite)}
    write_json({"config": eff, "cells": cells}, out / "report.json")
    (out / "table.csv").write_text(_header_line(eff)
                                   + rows_to_table_csv(labelled, include_runtime=False))
    _write_timings(out / "timings.csv", labelled)
    print(rows_to_table_csv(labelled), end="")
    return EXIT_OK


def _parse_k(values: Sequence[str]) -> list[int]:
    ks = []
    for v in values:
        if ".." in v:
            lo, hi = v.split("..", 1)
            ks += list(range(int(lo), int(hi) + 1))
        else:
            ks.append(int(v))
    if not ks or min(ks) < 1:
        raise ConfigError("--k values must be positive integers")
    return ks


def cmd_sweep(args) -> int:
    if args.config is None:
        raise ConfigError("sweep needs --config")
    specs = _specs_from(load_config(args.config, "sweep"))
    if len(specs) != 1:
        raise ConfigError("sweep takes exactly one experiment")
    spec = _apply(specs[0], _spec_overrides(args))
    try:
        ks = _parse_k(args.k)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    result = time_discretization_sweep(spec, ks)
    label = spec.label or spec.process.family
    labelled = [(label, r) for r in result.rows]
    eff = {"experiment": spec.to_dict(), "k": ks, "base_lambda": result.base_lambda}
    write_json({"config": eff, "lambdas": {str(k): v for k, v in result.lambdas().items()},
                "rows": _public_rows(result.rows)}, Path(_out_dir(args)) / "sweep.json")
    out = Path(args.out)
    (out / "table.csv").write_text(_header_line(eff)
                                   + rows_to_table_csv(labelled, include_runtime=False))
    _write_timings(out / "timings.csv", labelled)
    if args.plot_data:
        for k, res in result.results.items():
            _write_plot_data(out, label, res, k)
    print(rows_to_table_csv(labelled), end="")
    return EXIT_OK


# --- parser ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, *, trajectory: bool = False):
    if trajectory:
        p.add_argument("trajectory", help="trajectory CSV (t,x or t,x1..xd)")
    p.add_argument("--config", help="TOML or JSON config file")
    p.add_argument("--out", default=".", help="output directory (default: .)")
    p.add_argument("--seed", type=int, help="base seed (overrides the config)")
    p.add_argument("--plot-data", action="store_true", help="also write plot-ready CSVs")


def _model_flags(p: argparse.ArgumentParser):
    p.add_argument("--optimizer", choices=["NormBoundedGD", "NewtonArmijo"])
    p.add_argument("--drift-family", choices=["Matern52", "Linear"])
    p.add_argument("--vol-family", choices=["Matern52", "Linear"])
    p.add_argument("--lam", type=float, help="discretization-noise variance")
    p.add_argument("--gamma", type=float, help="smoothing noise variance")
    p.add_argument("--gd-max-iters", type=int)
    p.add_argument("--hyperparams", help="JSON file with kernel hyperparameters "
                                         "(e.g. hyperparams.json from `learn`)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sde-recover",
                                     description="Drift and volatility recovery for 1-D SDEs "
                                                 "from sampled trajectories.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="log progress (-vv for per-fit detail)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Euler-Maruyama trajectory to CSV")
    _common(p)
    p.add_argument("--process", choices=["ExpDecayVol", "Trigonometric", "GBM", "OU"])
    p.add_argument("--param", action="append", metavar="KEY=VALUE",
                   help="process parameter, repeatable")
    p.add_argument("--x0", type=float)
    p.add_argument("--dt", type=float)
    p.add_argument("--n-steps", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="MAP drift/volatility estimate")
    _common(p, trajectory=True)
    _model_flags(p)
    p.add_argument("--trace", action="store_true", help="include the loss trace in fit.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("learn", help="kernel hyperparameters by randomized cross-validation")
    _common(p, trajectory=True)
    _model_flags(p)
    p.add_argument("--budget", type=int, help="objective evaluations")
    p.add_argument("--partitions", type=int, help="random partitions per evaluation")
    p.set_defaults(func=cmd_learn)

    p = sub.add_parser("benchmark", help="GP regression with a white-noise kernel")
    _common(p, trajectory=True)
    p.add_argument("--family", choices=["Matern52", "Linear"])
    p.add_argument("--budget", type=int)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("evaluate", help="score all methods on simulated experiments")
    _common(p)
    p.add_argument("--reference-suite", "--paper-suite", dest="reference_suite", action="store_true",
                   help="run the catalog processes with their published parameters")
    p.add_argument("--n", type=int, help="train and test size per experiment")
    p.add_argument("--gd-max-iters", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="time-discretization sweep over subsampling factors")
    _common(p)
    p.add_argument("--k", nargs="+", default=["1..10"], help="factors, e.g. 1 2 5 or 1..10")
    p.add_argument("--n", type=int, help="train and test size")
    p.add_argument("--gd-max-iters", type=int)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else (
        logging.INFO if args.verbose == 1 else logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteStateError as exc:
        print(f"error: simulation failed: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except (NonFiniteLossError, FactorizationError, np.linalg.LinAlgError) as exc:
        print(f"error: optimization failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except (ConfigError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
