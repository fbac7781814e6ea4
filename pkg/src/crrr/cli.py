"""Command-line interface.

Every command writes its outputs plus ``manifest.json`` (the fully resolved
configuration) into the output directory.  Flags and JSON config keys are
the same names; a value in ``--config`` overrides the flag with a warning.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 acceptance threshold breached under ``--check``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, nn
from .bootstrap import BootstrapConfig, BootstrapFailed, bootstrap_rho
from .data import Dataset, OutcomeKind
from .dctm import DctmModel
from .ddctm import DdctmModel
from .distreg import DrContinuousModel, DrDiscreteModel
from .empirical import ColumnSpec, ReportConfig, SpecError, dumps, ingest_csv, mobility_report
from .engine import (FitConfig, FoldFitError, FoldPlan, RankSet, crossfit_ranks, estimates,
                     rrr_slope)
from .numeric import RngStream
from . import simlab

log = logging.getLogger("crrr")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CHECK = 0, 2, 3, 4
OUT_ENV = "CRRR_OUT"

DEFAULTS = {
    "dgp": "simple-normal", "delta": 0.0, "n": 50_000, "reps": 1, "seed": 0,
    "estimator": "dctm", "K": 3, "omega": None, "omega_grid": None, "B": 500, "alpha": 0.05,
    "scheme": "multinomial", "cold_start": False, "refit_epochs": None, "refit_patience": None,
    "J": 32, "M": 100, "class_weights": None,
    "learning_rate": 1e-3, "batch_size": 256, "max_epochs": 200, "patience": 10,
    "val_fraction": 0.1, "hidden": [64, 64], "activation": "relu",
    "average": 0.99, "data": None, "kind": "continuous", "preset": "desk", "check": False, "tolerance": 0.01,
    "workers": None, "bins": 10, "report_config": None,
}

PRESETS = {"desk": {"n": 50_000, "reps": 5}, "paper": {"n": 100_000, "reps": 30}}


class ConfigError(ValueError):
    pass


class CheckFailed(RuntimeError):
    pass


# -- config ------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crrr", description="Conditional rank-rank regression")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with the same keys as the flags")
        sp.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./crrr-out)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--check", action="store_true", default=None,
                        help="exit 4 if an acceptance threshold is breached")
        sp.add_argument("--tolerance", type=float)
        sp.add_argument("-v", "--verbose", action="store_true")

    def model(sp):
        sp.add_argument("--estimator", choices=["dctm", "ddctm", "dr"])
        sp.add_argument("--K", type=int, help="cross-fitting folds")
        sp.add_argument("--J", type=int, help="Bernstein order")
        sp.add_argument("--M", type=int, help="DR threshold count")
        sp.add_argument("--class-weights", dest="class_weights", choices=["inverse-frequency"])
        sp.add_argument("--learning-rate", dest="learning_rate", type=float)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--max-epochs", dest="max_epochs", type=int)
        sp.add_argument("--patience", type=int)
        sp.add_argument("--val-fraction", dest="val_fraction", type=float)
        sp.add_argument("--hidden", type=lambda s: [int(v) for v in s.split(",")])
        sp.add_argument("--activation", choices=["relu", "tanh"])
        sp.add_argument("--average", type=float,
                        help="iterate averaging factor in (0, 1); 0 turns it off")
        sp.add_argument("--omega", type=float)

    def source(sp):
        sp.add_argument("--data", help="dataset CSV with columns y, w, x1..xp")
        sp.add_argument("--kind", help="'continuous' or an ordinal category count")
        sp.add_argument("--dgp", choices=list(simlab.KINDS))
        sp.add_argument("--delta", type=float)
        sp.add_argument("--n", type=int)

    def boot(sp):
        sp.add_argument("--B", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--scheme", choices=["multinomial", "dirichlet"])
        sp.add_argument("--cold-start", dest="cold_start", action="store_true", default=None)
        sp.add_argument("--refit-epochs", dest="refit_epochs", type=int)
        sp.add_argument("--refit-patience", dest="refit_patience", type=int)

    sp = sub.add_parser("simulate", help="generate a design, its truth and optional MC tables")
    common(sp), model(sp)
    sp.add_argument("--dgp", choices=list(simlab.KINDS))
    sp.add_argument("--delta", type=float)
    sp.add_argument("--n", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--preset", choices=list(PRESETS))
    sp.add_argument("--omega-grid", dest="omega_grid", type=int,
                    help="number of equally spaced omegas for a sweep table")

    for name, hlp in (("fit", "fit Y- and W-models per fold and dump them"),
                      ("ranks", "write out-of-fold ranks"),
                      ("estimate", "ranks plus the estimator report"),
                      ("bootstrap", "exchangeable bootstrap SE and intervals"),
                      ("diagnose", "PIT calibration tables")):
        sp = sub.add_parser(name, help=hlp)
        common(sp), model(sp), source(sp)
        if name == "bootstrap":
            boot(sp)
        if name == "diagnose":
            sp.add_argument("--bins", type=int)

    sp = sub.add_parser("report", help="empirical mobility report from a CSV + JSON spec")
    common(sp), model(sp), boot(sp)
    sp.add_argument("--report-config", dest="report_config", help="alias of --config")
    return p


def resolve(args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS)
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("config", "out", "verbose", "command")}
    preset = flags.get("preset", cfg["preset"])
    if args.command == "simulate":
        cfg.update(PRESETS[preset])
    cfg.update(flags)
    path = args.config or getattr(args, "report_config", None)
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(file_cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        for k, v in file_cfg.items():
            if k in flags and flags[k] != v:
                warnings.warn(f"config file overrides --{k} ({flags[k]!r} -> {v!r})",
                              stacklevel=2)
            cfg[k] = v
        cfg["config_dir"] = str(Path(path).resolve().parent)
    unknown = set(cfg) - set(DEFAULTS) - {"config_dir", "spec", "preset"} - set(flags)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if cfg["workers"] is None:
        cfg["workers"] = os.cpu_count() or 1
    cfg["command"] = args.command
    cfg["version"] = __version__
    return cfg


def fit_config(cfg: dict) -> FitConfig:
    for key, lo in (("J", 1), ("M", 1), ("K", 2)):
        if int(cfg[key]) < lo:
            raise ConfigError(f"{key} must be >= {lo}")
    try:
        tr = nn.TrainConfig(learning_rate=float(cfg["learning_rate"]),
                            batch_size=int(cfg["batch_size"]), max_epochs=int(cfg["max_epochs"]),
                            patience=int(cfg["patience"]), val_fraction=float(cfg["val_fraction"]),
                            hidden=tuple(cfg["hidden"]), activation=cfg["activation"],
                            average=float(cfg["average"]) or None)
        return FitConfig(train=tr, J=int(cfg["J"]), M=int(cfg["M"]),
                         class_weights=cfg["class_weights"])
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model settings: {e}") from e


def boot_config(cfg: dict) -> BootstrapConfig:
    refit = None
    if cfg["refit_epochs"] is not None or cfg["refit_patience"] is not None:
        base = fit_config(cfg).train
        refit = nn.TrainConfig(**{**base.__dict__,
                                  "max_epochs": int(cfg["refit_epochs"] or base.max_epochs),
                                  "patience": int(cfg["refit_patience"] or base.patience)})
    if cfg["scheme"] not in ("multinomial", "dirichlet"):
        raise ConfigError(f"unknown scheme {cfg['scheme']!r}")
    return BootstrapConfig(B=int(cfg["B"]), alpha=float(cfg["alpha"]), scheme=cfg["scheme"],
                           warm_start=not cfg["cold_start"], refit_train=refit)


def dgp_spec(cfg: dict) -> simlab.DgpSpec:
    try:
        return simlab.DgpSpec(cfg["dgp"], delta=float(cfg["delta"])).resolved()
    except ValueError as e:
        raise ConfigError(str(e)) from e


# -- io ----------------------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v))


def write_dataset(path: Path, data: Dataset):
    cols = ["y", "w", *data.columns]
    lines = [",".join(cols)]
    for i in range(data.n):
        vals = [data.y[i], data.w[i], *data.x[i]]
        lines.append(",".join(_fmt(v) for v in vals))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_dataset(path, kind) -> Dataset:
    try:
        text = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"cannot read dataset {path}: {e}") from e
    header = text[0].split(",")
    if header[:2] != ["y", "w"]:
        raise ConfigError("dataset CSV must start with columns y,w")
    try:
        arr = np.array([[float(v) for v in line.split(",")] for line in text[1:] if line],
                       dtype=float)
    except ValueError as e:
        raise ConfigError(f"non-numeric dataset cell: {e}") from e
    ok = OutcomeKind.parse(int(kind) if isinstance(kind, str) and kind.isdigit() else kind)
    return Dataset(arr[:, 0], arr[:, 1], arr[:, 2:], ok, ok, header[2:])


def _json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, default=_default) + "\n",
                    encoding="utf-8")


def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def out_dir(args) -> Path:
    p = Path(args.out or os.environ.get(OUT_ENV) or "crrr-out")
    p.mkdir(parents=True, exist_ok=True)
    return p


def _source(cfg) -> tuple[Dataset, simlab.DgpSpec | None]:
    if cfg["data"]:
        return read_dataset(cfg["data"], cfg["kind"]), None
    spec = dgp_spec(cfg)
    return simlab.generate(spec, int(cfg["n"]), RngStream(int(cfg["seed"])).child("data")), spec


def _family(cfg, data: Dataset) -> str:
    fam = cfg["estimator"]
    if fam == "dctm" and not data.y_kind.continuous:
        return "ddctm"
    return fam


def _omega(cfg, data):
    if data.y_kind.continuous and data.w_kind.continuous:
        return None
    return 0.5 if cfg["omega"] is None else float(cfg["omega"])


# -- commands ----------------------------------------------------------------------


def cmd_simulate(cfg, out: Path):
    spec = dgp_spec(cfg)
    rng = RngStream(int(cfg["seed"]))
    data = simlab.generate(spec, int(cfg["n"]), rng.child("data"))
    write_dataset(out / "dataset.csv", data)
    omegas = [0.0, 0.5, 1.0] if spec.discrete else [None]
    truths = {("continuous" if om is None else repr(om)): simlab.truth(spec, om) for om in omegas}
    _json(out / "truth.json", {"dgp": spec.to_dict(), "truth": truths})
    fam = "ddctm" if (spec.discrete and cfg["estimator"] == "dctm") else cfg["estimator"]
    result = {"truth": truths}
    if int(cfg["reps"]) > 1:
        run = simlab.mc_run(spec, fam, int(cfg["reps"]), int(cfg["n"]), int(cfg["seed"]),
                            omegas, fit_config(cfg), int(cfg["K"]))
        (out / "mc.csv").write_text(run.table_csv(), encoding="utf-8")
        result["mc"] = {repr(om): run.result(om).row() for om in omegas}
        if cfg["check"]:
            for om in omegas:
                r = run.result(om)
                if abs(r.mean - r.truth) > float(cfg["tolerance"]):
                    raise CheckFailed(f"omega={om}: |mean - truth| = {abs(r.mean - r.truth):.5f}")
    if cfg["omega_grid"]:
        g = int(cfg["omega_grid"])
        grid = np.linspace(0.0, 1.0, g)
        cf = crossfit_ranks(data, fam, K=int(cfg["K"]), seed=rng.child("fit"), cfg=fit_config(cfg))
        tf = (lambda om: simlab.truth(spec, om)) if spec.discrete else (lambda om: truths["continuous"])
        rows = simlab.omega_sweep(cf, grid, tf)
        (out / "omega_sweep.csv").write_text(simlab.rows_csv(rows), encoding="utf-8")
    return result


def _crossfit(cfg, data):
    fam = _family(cfg, data)
    return crossfit_ranks(data, fam, K=int(cfg["K"]), omega=_omega(cfg, data),
                          seed=RngStream(int(cfg["seed"])).child("fit"), cfg=fit_config(cfg))


def _estimate_report(cfg, data, cf, spec):
    rs = cf.ranks
    om = 1.0 if rs.omega is None else rs.omega
    est = estimates(rs)
    rrr = rrr_slope(data.y, data.w, om)
    rep = {**est, "rrr_slope": rrr, "between_component": rrr - est["rho_ols"], "se": None,
           "aci": None, "seed": int(cfg["seed"]), "K": int(cfg["K"]), "omega": rs.omega,
           "B": None, "family": cf.family, "n": data.n}
    if spec is not None:
        rep["truth"] = simlab.truth(spec, rs.omega)
    return rep


def _check(cfg, rep):
    if cfg["check"] and "truth" in rep:
        gap = abs(rep["rho_ols"] - rep["truth"])
        if gap > float(cfg["tolerance"]):
            raise CheckFailed(f"|rho_ols - truth| = {gap:.5f} > {cfg['tolerance']}")


def cmd_fit(cfg, out):
    data, _ = _source(cfg)
    cf = _crossfit(cfg, data)
    mdir = out / "models"
    mdir.mkdir(exist_ok=True)
    for k, (my, mw) in enumerate(cf.models):
        (mdir / f"fold{k}_y.json").write_text(my.dumps() + "\n", encoding="utf-8")
        (mdir / f"fold{k}_w.json").write_text(mw.dumps() + "\n", encoding="utf-8")
    np.savetxt(out / "folds.csv", cf.ranks.folds.assignment, fmt="%d")
    return {"folds": cf.ranks.folds.K, "family": cf.family}


def cmd_ranks(cfg, out):
    data, _ = _source(cfg)
    cf = _crossfit(cfg, data)
    (out / "ranks.csv").write_text(cf.ranks.to_csv(), encoding="utf-8")
    return {"n": data.n}


def cmd_estimate(cfg, out):
    data, spec = _source(cfg)
    cf = _crossfit(cfg, data)
    (out / "ranks.csv").write_text(cf.ranks.to_csv(), encoding="utf-8")
    rep = _estimate_report(cfg, data, cf, spec)
    _json(out / "estimate.json", rep)
    _check(cfg, rep)
    return rep


def cmd_bootstrap(cfg, out):
    data, spec = _source(cfg)
    cf = _crossfit(cfg, data)
    bc = boot_config(cfg)
    run = bootstrap_rho(data, cf, bc, RngStream(int(cfg["seed"])).child("boot"))[cf.ranks.omega]
    rep = _estimate_report(cfg, data, cf, spec)
    rep.update(se=run.se["rho_ols"], aci=list(run.aci["rho_ols"]), B=bc.B,
               bootstrap=run.to_dict())
    (out / "draws.csv").write_text(run.draw_log_csv(), encoding="utf-8")
    _json(out / "bootstrap.json", rep)
    if cfg["check"] and "truth" in rep:
        lo, hi = rep["aci"]
        if not lo <= rep["truth"] <= hi:
            raise CheckFailed(f"interval [{lo:.5f}, {hi:.5f}] misses the truth {rep['truth']:.5f}")
    return rep


def cmd_diagnose(cfg, out):
    data, spec = _source(cfg)
    cf = _crossfit(cfg, data)
    if data.p == 1 and np.all(np.isin(data.x[:, 0], (0.0, 1.0))):
        cells = simlab.pit_cells_by_group(cf.ranks, data.x[:, 0], cf.family)
    else:
        cells = {f"Y|{cf.family}": cf.ranks.fy, f"W|{cf.family}": cf.ranks.fw}
    rows = simlab.pit_report(cells, int(cfg["bins"]))
    (out / "pit.csv").write_text(simlab.rows_csv(rows), encoding="utf-8")
    if cfg["check"]:
        bad = [r["cell"] for r in rows if r["ks_p"] < 0.01 or r["chi2_p"] < 0.01]
        if bad:
            raise CheckFailed(f"PIT uniformity rejected in {bad}")
    return {"cells": rows}


def cmd_report(cfg, out):
    spec_d = cfg.get("spec")
    if spec_d is None:
        raise ConfigError("report needs a 'spec' object in the config file")
    spec = ColumnSpec.from_dict(spec_d)
    if not cfg["data"]:
        raise ConfigError("report needs 'data' (CSV path)")
    path = Path(cfg["data"])
    if not path.is_absolute() and "config_dir" in cfg:
        path = Path(cfg["config_dir"]) / path
    data, ing, table = ingest_csv(path, spec)
    omegas = cfg["omega"] if isinstance(cfg["omega"], list) else [cfg["omega"]]
    rc = ReportConfig(family=_family(cfg, data), K=int(cfg["K"]), omegas=omegas,
                      boot=boot_config(cfg), fit=fit_config(cfg), seed=int(cfg["seed"]),
                      Q=10)
    rep = mobility_report(data, spec, rc, table)
    rep["ingest"] = {"rows_read": ing.rows_read, "rows_dropped": ing.rows_dropped,
                     "imputed": ing.imputed}
    (out / "report.json").write_text(dumps(rep), encoding="utf-8")
    P = np.asarray(rep["transition"]["P"])
    np.savetxt(out / "transition.csv", P, delimiter=",", fmt="%.12g")
    return {"blocks": len(rep["blocks"])}


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "ranks": cmd_ranks,
            "estimate": cmd_estimate, "bootstrap": cmd_bootstrap, "diagnose": cmd_diagnose,
            "report": cmd_report}


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        out = out_dir(args)
        _json(out / "manifest.json", {k: v for k, v in sorted(cfg.items()) if k != "config_dir"})
        COMMANDS[args.command](cfg, out)
    except (ConfigError, SpecError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as e:
        print(f"check failed: {e}", file=sys.stderr)
        return EXIT_CHECK
    except (FoldFitError, BootstrapFailed, nn.TrainingDiverged, ZeroDivisionError,
            FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
