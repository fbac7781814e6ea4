"""CSV ingestion and mobility reports (transition matrices, RRR/CRRR tables)."""

from __future__ import annotations

import csv
import json
import logging
import operator
from dataclasses import dataclass, field

import numpy as np

from .bootstrap import BootstrapConfig, bootstrap_rho
from .data import CONTINUOUS, Dataset, OutcomeKind
from .engine import (FitConfig, crossfit_ranks, estimates, marginal_ranks, rrr_slope)
from .numeric import RngStream

log = logging.getLogger(__name__)

COMPARATORS = {"==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le,
               ">": operator.gt, ">=": operator.ge}
MIN_SUBGROUP = 100


class SpecError(ValueError):
    pass


@dataclass
class Subgroup:
    name: str
    column: str
    op: str
    value: float

    def mask(self, table: dict) -> np.ndarray:
        if self.op not in COMPARATORS:
            raise SpecError(f"unknown comparator {self.op!r}")
        return COMPARATORS[self.op](table[self.column], self.value)


@dataclass
class ColumnSpec:
    child: str
    parent: str
    covariates: list
    kind: OutcomeKind = CONTINUOUS
    transforms: dict = field(default_factory=dict)  # column -> "none" | "log1p"
    impute: str = "median"  # applied to covariates only
    filters: list = field(default_factory=list)  # Subgroup-style row filters
    subgroups: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ColumnSpec":
        try:
            return cls(
                child=d["child"], parent=d["parent"], covariates=list(d["covariates"]),
                kind=OutcomeKind.parse(d.get("kind", "continuous")),
                transforms=dict(d.get("transforms", {})), impute=d.get("impute", "median"),
                filters=[Subgroup(**f) for f in d.get("filters", [])],
                subgroups=[Subgroup(**s) for s in d.get("subgroups", [])])
        except (KeyError, TypeError) as e:
            raise SpecError(f"invalid column spec: {e}") from e

    def to_dict(self) -> dict:
        return {"child": self.child, "parent": self.parent, "covariates": self.covariates,
                "kind": self.kind.to_json(), "transforms": self.transforms, "impute": self.impute,
                "filters": [f.__dict__ for f in self.filters],
                "subgroups": [s.__dict__ for s in self.subgroups]}


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_dropped: int = 0
    imputed: dict = field(default_factory=dict)


def _read_table(path) -> dict:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None:
            raise SpecError(f"{path}: no header row")
        cols = {c: [] for c in rd.fieldnames}
        for row in rd:
            for c in rd.fieldnames:
                cols[c].append(row[c])
    return cols


def _to_float(values, name):
    out = np.empty(len(values))
    for i, v in enumerate(values):
        v = v.strip()
        if v == "" or v.lower() in ("na", "nan"):
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except ValueError as e:
            raise SpecError(f"column {name!r} row {i + 1}: non-numeric value {v!r}") from e
    return out


def ingest_csv(path, spec: ColumnSpec) -> tuple[Dataset, IngestReport, dict]:
    """Read, filter, transform and impute.  Returns (data, report, numeric table)."""
    raw = _read_table(path)
    needed = [spec.child, spec.parent, *spec.covariates,
              *(f.column for f in spec.filters), *(s.column for s in spec.subgroups)]
    missing = [c for c in dict.fromkeys(needed) if c not in raw]
    if missing:
        raise SpecError(f"missing columns: {missing}")
    table = {c: _to_float(raw[c], c) for c in dict.fromkeys(needed)}
    rep = IngestReport(rows_read=len(raw[spec.child]))
    keep = np.isfinite(table[spec.child]) & np.isfinite(table[spec.parent])
    for f in spec.filters:
        keep &= f.mask(table)
    rep.rows_dropped = int(np.count_nonzero(~keep))
    table = {c: v[keep] for c, v in table.items()}
    for col, tr in spec.transforms.items():
        if tr == "log1p":
            v = table[col]
            if np.any(v[np.isfinite(v)] <= -1):
                raise SpecError(f"log1p needs values > -1 in column {col!r}")
            table[col] = np.log1p(v)
        elif tr not in ("none", None):
            raise SpecError(f"unknown transform {tr!r}")
    x = np.column_stack([table[c] for c in spec.covariates]) if spec.covariates \
        else np.zeros((keep.sum(), 0))
    for j, c in enumerate(spec.covariates):
        bad = ~np.isfinite(x[:, j])
        if bad.any():
            if spec.impute != "median":
                raise SpecError(f"missing values in {c!r} and imputation is off")
            x[bad, j] = np.median(x[~bad, j])
            rep.imputed[c] = int(bad.sum())
    y, w = table[spec.child], table[spec.parent]
    if not spec.kind.continuous:
        K = spec.kind.categories
        for name, v in (("child", y), ("parent", w)):
            if np.any(v != np.round(v)) or v.min() < 0 or v.max() > K - 1:
                raise SpecError(f"{name} outcome must be integer coded 0..{K - 1}")
    data = Dataset(y, w, x, spec.kind, spec.kind, list(spec.covariates))
    return data, rep, table


@dataclass
class TransitionMatrix:
    Q: int
    P: np.ndarray
    empty_rows: list

    @property
    def D(self) -> np.ndarray:
        """Percent deviation from independence, 100 (P - 1/Q) / (1/Q)."""
        return 100.0 * (self.P * self.Q - 1.0)

    def to_dict(self):
        return {"Q": self.Q, "P": self.P.tolist(), "D": self.D.tolist(),
                "empty_rows": self.empty_rows}


def decile_bins(r, Q: int) -> np.ndarray:
    """Bin index 0..Q-1 from omega=1 marginal ranks; bin i holds ranks in (i/Q, (i+1)/Q]."""
    rk = marginal_ranks(r, 1.0)
    return np.clip(np.ceil(rk * Q - 1e-9).astype(int) - 1, 0, Q - 1)


def transition_matrix(y, w, Q: int = 10) -> TransitionMatrix:
    """P[i, j] = P(child bin j | parent bin i)."""
    y = np.asarray(y, dtype=float)
    if y.size < 10 * Q:
        raise ValueError(f"transition matrix needs n >= {10 * Q}")
    by, bw = decile_bins(y, Q), decile_bins(w, Q)
    counts = np.zeros((Q, Q))
    np.add.at(counts, (bw, by), 1.0)
    tot = counts.sum(axis=1)
    empty = [int(i) for i in np.flatnonzero(tot == 0)]
    P = np.where(tot[:, None] > 0, counts / np.where(tot > 0, tot, 1.0)[:, None], 1.0 / Q)
    return TransitionMatrix(Q, P, empty)


@dataclass
class ReportConfig:
    family: str = "dctm"
    K: int = 3
    omegas: list = field(default_factory=lambda: [None])
    boot: BootstrapConfig = field(default_factory=lambda: BootstrapConfig(B=200))
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    Q: int = 10
    min_subgroup: int = MIN_SUBGROUP


def _row(label, est, rrr, boot_run):
    r = {"row": label, **{k: est[k] for k in ("rho_ols", "rho_corr", "rho_cov")}}
    if rrr is not None:
        r["rrr"] = rrr
        r["between"] = rrr - est["rho_ols"]
    if boot_run is not None:
        r["se"] = boot_run.se["rho_ols"]
        r["ci"] = list(boot_run.aci["rho_ols"])
    return r


def mobility_report(data: Dataset, spec: ColumnSpec, cfg: ReportConfig, table=None) -> dict:
    """RRR, CRRR (three forms), subgroup rows and bootstrap intervals per omega block."""
    rng = RngStream(cfg.seed)
    omegas = [None] if data.y_kind.continuous and data.w_kind.continuous else \
        [0.5 if om is None else om for om in cfg.omegas]
    cf = crossfit_ranks(data, cfg.family, K=cfg.K, seed=rng.child("main"), cfg=cfg.fit)
    masks = {}
    for sg in spec.subgroups:
        if table is None:
            raise SpecError("subgroup rows need the ingested table")
        masks[sg.name] = sg.mask(table)
    big = {k: m for k, m in masks.items() if np.count_nonzero(m) >= cfg.min_subgroup}
    boots = bootstrap_rho(data, cf, cfg.boot, rng.child("boot"), omegas, big) \
        if cfg.boot.B > 0 else {}
    blocks = []
    for om in omegas:
        rs = cf.ranks.with_omega(om)
        om_m = 1.0 if om is None else om
        rrr = rrr_slope(data.y, data.w, om_m)
        est = estimates(rs)
        rows = [{"row": "RRR", "rho_ols": rrr}, _row("CRRR", est, rrr, boots.get(om))]
        for name, m in masks.items():
            size = int(np.count_nonzero(m))
            if size < cfg.min_subgroup:
                rows.append({"row": f"CRRR, {name}", "n": size, "flag": "below minimum size"})
                continue
            sub = estimates(rs.subset(m))
            r = _row(f"CRRR, {name}", sub, None, None)
            r["n"] = size
            if (om, name) in boots:
                run = boots[(om, name)]
                r["se"], r["ci"] = run.se["rho_ols"], list(run.aci["rho_ols"])
            rows.append(r)
        blocks.append({"omega": om, "rows": rows,
                       "between_component": rrr - est["rho_ols"]})
    return {
        "n": data.n, "family": cfg.family, "K": cfg.K, "seed": cfg.seed,
        "B": cfg.boot.B, "spec": spec.to_dict(), "blocks": blocks,
        "transition": transition_matrix(data.y, data.w, cfg.Q).to_dict(),
        "heuristic_se": not data.y_kind.continuous,
    }


def dumps(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))
