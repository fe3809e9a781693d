"""Command-line driver: ``simulate``, ``fit``, ``cv``, ``rates``, ``diagnose``.

Every command takes an optional JSON config (``--config``); flags override
its fields. The fully resolved config is written next to the outputs as
``config.json``, with the only run-dependent value (a timestamp) kept under
``metadata``. Exit codes: 0 success, 2 usage error, 3 solver non-convergence
(artifacts are still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .core import DatasetError, TemporalSpatialDataset, read_dataset_csv
from .evaluation import (
    CvPlan,
    KnnFusedLassoMethod,
    RateStudy,
    TrendFilterMethod,
    default_lambda_grid,
    embedding_diagnostics,
    kfold_select,
    run_rate_study,
)
from .gfl import AdmmOptions, fit_constrained_knnfl, fit_penalized_knnfl, KnnflBracketError
from .knn_graph import build_knn_graph
from .simgen import ScenarioConfig, generate, write_generated
from .tf1d import TfConvergenceError, fit_constrained_tf, fit_penalized_tf

EXIT_OK, EXIT_USAGE, EXIT_SOLVER = 0, 2, 3


class UsageError(Exception):
    pass


_NUM = {"type": "number"}
_INT = {"type": "integer"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_NONNEG = {"type": "number", "minimum": 0}
_METHOD = {"enum": ["tf", "knnfl"]}
_GRID = {"type": "array", "items": _NONNEG, "minItems": 1}

SCHEMAS = {
    "simulate": {
        "type": "object",
        "additionalProperties": False,
        "required": ["scenario_id", "n"],
        "properties": {
            "scenario_id": {"type": "integer", "minimum": 1, "maximum": 8},
            "n": {"type": "integer", "minimum": 4},
            "m_mult": _POS,
            "d": {"type": "integer", "minimum": 1},
            "phi": {"type": "number", "minimum": 0, "maximum": 1},
            "basis_count": {"type": "integer", "minimum": 1},
            "b_sd": _NONNEG,
            "xi_var": _NONNEG,
            "ar_delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "ar_eps": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "seed": {"type": "integer", "minimum": 0},
        },
    },
    "fit": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "method"],
        "properties": {
            "data": {"type": "string"},
            "method": _METHOD,
            "k": {"type": "integer", "minimum": 1},
            "K": {"type": "integer", "minimum": 1},
            "lambda": _NONNEG,
            "budget": _POS,
            "cv_grid": _GRID,
            "folds": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer", "minimum": 0},
            "eps_abs": _POS,
            "eps_rel": _POS,
            "max_iter": {"type": "integer", "minimum": 1},
        },
    },
    "cv": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data", "method"],
        "properties": {
            "data": {"type": "string"},
            "method": _METHOD,
            "k": {"type": "integer", "minimum": 1},
            "K": {"type": "integer", "minimum": 1},
            "grid": _GRID,
            "folds": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer", "minimum": 0},
        },
    },
    "rates": {
        "type": "object",
        "additionalProperties": False,
        "required": ["scenario_id", "n_values", "replicates"],
        "properties": {
            "scenario_id": {"type": "integer", "minimum": 1, "maximum": 8},
            "n_values": {"type": "array", "items": {"type": "integer", "minimum": 4}, "minItems": 3},
            "replicates": {"type": "integer", "minimum": 1},
            "method": _METHOD,
            "k": {"type": "integer", "minimum": 1},
            "K": {"type": "integer", "minimum": 1},
            "m_mult": _POS,
            "d": {"type": "integer", "minimum": 1},
            "grid_count": {"type": "integer", "minimum": 1},
            "grid_span": _NONNEG,
            "folds": {"type": "integer", "minimum": 2},
            "seed": {"type": "integer", "minimum": 0},
            "scenario_overrides": {"type": "object"},
        },
    },
    "diagnose": {
        "type": "object",
        "additionalProperties": False,
        "required": ["data"],
        "properties": {
            "data": {"type": "string"},
            "K": {"type": "integer", "minimum": 1},
            "N": {"type": "integer", "minimum": 1},
            "signal": {"type": "string"},
        },
    },
}

DEFAULTS = {
    "simulate": {"m_mult": 1.0, "d": 1, "phi": 0.1, "basis_count": 50, "b_sd": 1.0,
                 "xi_var": 0.5, "ar_delta": 0.5, "ar_eps": 0.3, "seed": 0},
    "fit": {"k": 1, "K": 5, "folds": 5, "seed": 0},
    "cv": {"k": 1, "K": 5, "folds": 5, "seed": 0},
    "rates": {"method": "tf", "k": 1, "K": 5, "m_mult": 1.0, "d": 1, "folds": 5, "seed": 0},
    "diagnose": {"K": 20},
}


# -- plumbing ------------------------------------------------------------------

def _dump(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _floats(text: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _resolve(command: str, args: argparse.Namespace, keys: list) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            with open(args.config) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config: top level must be an object")
        cfg.update(loaded)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"config error at {where}: {exc.message}") from None
    return cfg


def _write_config(out: Path, command: str, cfg: dict) -> None:
    _dump(
        {
            "command": command,
            "config": cfg,
            "metadata": {
                "created": datetime.now(timezone.utc).isoformat(),
                "version": __version__,
            },
        },
        out / "config.json",
    )


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path: str) -> TemporalSpatialDataset:
    try:
        return read_dataset_csv(path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _check_method(ds: TemporalSpatialDataset, method: str) -> None:
    if method == "tf" and ds.d != 1:
        raise UsageError(f"method tf needs d = 1 data, got d = {ds.d}")


def _method(cfg: dict, admm: AdmmOptions | None = None):
    if cfg["method"] == "tf":
        return TrendFilterMethod(cfg["k"])
    return KnnFusedLassoMethod(cfg["K"], admm)


def _admm(cfg: dict) -> AdmmOptions:
    kw = {k: cfg[k] for k in ("eps_abs", "eps_rel", "max_iter") if k in cfg}
    return AdmmOptions(**kw)


def _write_fitted(ds: TemporalSpatialDataset, fitted: np.ndarray, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["i", "j", "fitted"])
        for kk in range(ds.size):
            i = int(ds.time_of[kk])
            wr.writerow([i + 1, kk - int(ds.offsets[i]) + 1, repr(float(fitted[kk]))])


# -- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    keys = list(SCHEMAS["simulate"]["properties"])
    cfg = _resolve("simulate", args, keys)
    try:
        sc = ScenarioConfig(**cfg)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    data = generate(sc)
    write_generated(data, out / "data.csv", out / "truth.json")
    _write_config(out, "simulate", cfg)
    return EXIT_OK


def cmd_fit(args) -> int:
    keys = list(SCHEMAS["fit"]["properties"])
    cfg = _resolve("fit", args, keys)
    chosen = [k for k in ("lambda", "budget", "cv_grid") if k in cfg]
    if len(chosen) != 1:
        raise UsageError("give exactly one of lambda, budget or cv_grid")
    ds = _load(cfg["data"])
    _check_method(ds, cfg["method"])
    out = _outdir(args)
    _write_config(out, "fit", cfg)
    admm = _admm(cfg)
    report: dict = {"method": cfg["method"]}
    if "cv_grid" in cfg:
        cv = kfold_select(ds, _method(cfg, admm), cfg["cv_grid"],
                          CvPlan(folds=cfg["folds"], seed=cfg["seed"]), jobs=args.jobs)
        report["cv"] = cv.to_dict()
        cfg = dict(cfg, **{"lambda": cv.selected})
    code = EXIT_OK
    try:
        if cfg["method"] == "tf":
            if "budget" in cfg:
                fit = fit_constrained_tf(ds, cfg["k"], cfg["budget"])
            else:
                fit = fit_penalized_tf(ds, cfg["k"], cfg["lambda"])
            report.update(json.loads(fit.to_json()))
            fitted = fit.fitted
        else:
            g = build_knn_graph(ds.x, cfg["K"])
            if "budget" in cfg:
                res = fit_constrained_knnfl(ds, g, cfg["budget"], admm)
            else:
                res = fit_penalized_knnfl(ds, g, cfg["lambda"], admm)
            report.update(res.to_dict())
            fitted = res.fitted
            if not res.converged:
                code = EXIT_SOLVER
    except (TfConvergenceError, KnnflBracketError) as exc:
        report.update({"converged": False, "error": str(exc)})
        _dump(report, out / "fit.json")
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    _dump(report, out / "fit.json")
    _write_fitted(ds, fitted, out / "fitted.csv")
    if code == EXIT_SOLVER:
        print("solver did not converge; artifacts written", file=sys.stderr)
    return code


def cmd_cv(args) -> int:
    keys = list(SCHEMAS["cv"]["properties"])
    cfg = _resolve("cv", args, keys)
    ds = _load(cfg["data"])
    _check_method(ds, cfg["method"])
    grid = cfg.get("grid")
    if grid is None:
        grid = default_lambda_grid(cfg["method"], ds.size).tolist()
        cfg["grid"] = grid
    out = _outdir(args)
    _write_config(out, "cv", cfg)
    try:
        cv = kfold_select(ds, _method(cfg), grid, CvPlan(folds=cfg["folds"], seed=cfg["seed"]),
                          jobs=args.jobs)
    except TfConvergenceError as exc:
        _dump({"error": str(exc)}, out / "cv.json")
        return EXIT_SOLVER
    _dump(cv.to_dict(), out / "cv.json")
    return EXIT_OK


def cmd_rates(args) -> int:
    keys = list(SCHEMAS["rates"]["properties"])
    cfg = _resolve("rates", args, keys)
    try:
        study = RateStudy(**cfg)
        # Fail fast on incompatible scenario settings.
        ScenarioConfig(study.scenario_id, study.n_values[0], study.m_mult, study.d,
                       **study.scenario_overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(args)
    _write_config(out, "rates", cfg)
    try:
        report = run_rate_study(study, jobs=args.jobs)
    except TfConvergenceError as exc:
        _dump({"error": str(exc)}, out / "report.json")
        return EXIT_SOLVER
    rows = report.pop("rows")
    _dump(report, out / "report.json")
    with open(out / "rates.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["n", "size", "replicate", "seed", "lambda", "mse"])
        for r in rows:
            wr.writerow([r["n"], r["size"], r["replicate"], r["seed"], repr(r["lambda"]), repr(r["mse"])])
    return EXIT_OK


def cmd_diagnose(args) -> int:
    keys = list(SCHEMAS["diagnose"]["properties"])
    cfg = _resolve("diagnose", args, keys)
    ds = _load(cfg["data"])
    theta = ds.y
    if "signal" in cfg:
        try:
            with open(cfg["signal"]) as fh:
                theta = np.asarray(json.load(fh)["truth"], dtype=float)
        except (OSError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read signal from {cfg['signal']}: {exc}") from None
        if theta.shape != (ds.size,):
            raise UsageError("signal length does not match the dataset")
    if cfg["K"] >= ds.size:
        raise UsageError(f"K={cfg['K']} must be smaller than the number of points {ds.size}")
    g = build_knn_graph(ds.x, cfg["K"])
    out = _outdir(args)
    _write_config(out, "diagnose", cfg)
    _dump(embedding_diagnostics(theta, ds, g, cfg.get("N")), out / "diagnostics.json")
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempspat", description=__doc__.split("\n")[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config; flags override its fields")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")

    s = sub.add_parser("simulate", help="generate a scenario dataset and its truth")
    common(s)
    s.add_argument("--scenario", dest="scenario_id", type=int)
    s.add_argument("--n", type=int)
    s.add_argument("--m-mult", dest="m_mult", type=float)
    s.add_argument("--d", type=int)
    s.add_argument("--phi", type=float)
    s.add_argument("--basis-count", dest="basis_count", type=int)
    s.add_argument("--b-sd", dest="b_sd", type=float)
    s.add_argument("--xi-var", dest="xi_var", type=float)
    s.add_argument("--ar-delta", dest="ar_delta", type=float)
    s.add_argument("--ar-eps", dest="ar_eps", type=float)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit trend filtering or the K-NN fused lasso")
    common(f)
    f.add_argument("--data")
    f.add_argument("--method", choices=["tf", "knnfl"])
    f.add_argument("--k", type=int, help="trend filtering order")
    f.add_argument("--K", type=int, help="neighbors in the K-NN graph")
    f.add_argument("--lambda", dest="lambda", type=float, help="penalty")
    f.add_argument("--budget", type=float, help="TV budget for the constrained fit")
    f.add_argument("--cv-grid", dest="cv_grid", type=_floats, help="comma-separated penalties")
    f.add_argument("--folds", type=int)
    f.add_argument("--seed", type=int)
    f.add_argument("--eps-abs", dest="eps_abs", type=float)
    f.add_argument("--eps-rel", dest="eps_rel", type=float)
    f.add_argument("--max-iter", dest="max_iter", type=int)
    f.set_defaults(func=cmd_fit)

    c = sub.add_parser("cv", help="cross-validation curve over a penalty grid")
    common(c)
    c.add_argument("--data")
    c.add_argument("--method", choices=["tf", "knnfl"])
    c.add_argument("--k", type=int)
    c.add_argument("--K", type=int)
    c.add_argument("--grid", type=_floats, help="comma-separated penalties (default: size-scaled)")
    c.add_argument("--folds", type=int)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_cv)

    r = sub.add_parser("rates", help="Monte-Carlo error-rate study")
    common(r)
    r.add_argument("--scenario", dest="scenario_id", type=int)
    r.add_argument("--n-values", dest="n_values", type=_ints, help="comma-separated n")
    r.add_argument("--replicates", type=int)
    r.add_argument("--method", choices=["tf", "knnfl"])
    r.add_argument("--k", type=int)
    r.add_argument("--K", type=int)
    r.add_argument("--m-mult", dest="m_mult", type=float)
    r.add_argument("--d", type=int)
    r.add_argument("--grid-count", dest="grid_count", type=int)
    r.add_argument("--grid-span", dest="grid_span", type=float)
    r.add_argument("--folds", type=int)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_rates)

    dg = sub.add_parser("diagnose", help="lattice-embedding diagnostics")
    common(dg)
    dg.add_argument("--data")
    dg.add_argument("--K", type=int)
    dg.add_argument("--N", type=int, help="cells per axis (default: recommended size)")
    dg.add_argument("--signal", help="truth sidecar JSON; default is the responses")
    dg.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (UsageError, DatasetError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
