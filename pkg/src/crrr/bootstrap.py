"""Exchangeable bootstrap for the cross-fitted estimators.

Each draw reweights the sample, refits every fold model by weighted
maximum likelihood on the original fold plan, recomputes out-of-fold
ranks and evaluates the weighted estimators.  The standard error comes
from the interquartile range of the centred, sqrt(n)-scaled draws and the
interval is studentized by the empirical quantile of |Z| / sigma.
"""

from __future__ import annotations

import csv
import io
import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset
from .engine import CrossFit, FitConfig, FoldFitError, crossfit_ranks, estimates
from .numeric import RngStream, empirical_quantile, std_normal_quantile

log = logging.getLogger(__name__)

FORMS = ("rho_ols", "rho_corr", "rho_cov")
SCHEMES = ("multinomial", "dirichlet")
MAX_FAIL_FRACTION = 0.05
MIN_B_FOR_SE = 50
IQR_NORMAL = std_normal_quantile(0.75) - std_normal_quantile(0.25)


class BootstrapFailed(RuntimeError):
    pass


def gen_weights(scheme: str, n: int, rng: RngStream) -> np.ndarray:
    """Multinomial(n; 1/n, ...) counts, or i.i.d. Exp(1) draws for the Bayesian bootstrap."""
    if n < 1:
        raise ValueError("n must be >= 1")
    g = rng.generator()
    if scheme == "multinomial":
        return g.multinomial(n, np.full(n, 1.0 / n)).astype(float)
    if scheme == "dirichlet":
        return g.exponential(1.0, n)
    raise ValueError(f"unknown weight scheme {scheme!r}")


def normalize_weights(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    m = w.mean()
    if not m > 0:
        raise ValueError("weights have zero mean")
    return w / m


def weighted_rho(ranks, w) -> dict:
    return estimates(ranks, w)


def se_and_aci(draws, main: float, n: int, alpha: float = 0.05):
    """(se, (lo, hi), sigma_hat, t_hat) from bootstrap draws of one estimator."""
    d = np.sort(np.asarray(draws, dtype=float))
    if d.size < 2:
        raise ValueError("need at least 2 draws")
    z = np.sqrt(n) * (d - main)
    if np.all(d == d[0]) and d[0] == main:
        return 0.0, (main, main), 0.0, float("nan")
    iqr = empirical_quantile(z, 0.75) - empirical_quantile(z, 0.25)
    if iqr <= 0:
        raise ZeroDivisionError("bootstrap draws have zero interquartile range")
    sigma = iqr / IQR_NORMAL
    t = empirical_quantile(np.sort(np.abs(z) / sigma), 1.0 - alpha)
    half = t * sigma / np.sqrt(n)
    return sigma / np.sqrt(n), (main - half, main + half), sigma, t


@dataclass
class BootstrapConfig:
    B: int = 500
    alpha: float = 0.05
    scheme: str = "multinomial"
    warm_start: bool = True
    # Optional training schedule for the refits; None reuses the main one.
    refit_train: nn.TrainConfig | None = None

    def to_dict(self) -> dict:
        return {"B": self.B, "alpha": self.alpha, "scheme": self.scheme,
                "warm_start": self.warm_start,
                "refit_train": None if self.refit_train is None else self.refit_train.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BootstrapConfig":
        d = dict(d)
        rt = d.pop("refit_train", None)
        return cls(refit_train=None if rt is None else nn.TrainConfig.from_dict(rt), **d)


@dataclass
class BootstrapRun:
    B: int
    alpha: float
    main: dict
    draws: dict
    status: list
    se: dict = field(default_factory=dict)
    aci: dict = field(default_factory=dict)
    t_hat: dict = field(default_factory=dict)
    heuristic: bool = False

    @property
    def n_failed(self) -> int:
        return sum(s != "ok" for s in self.status)

    def to_dict(self) -> dict:
        return {"B": self.B, "alpha": self.alpha, "main": self.main, "se": self.se,
                "aci": {k: list(v) for k, v in self.aci.items()}, "t_hat": self.t_hat,
                "failed": self.n_failed, "heuristic": self.heuristic}

    def draw_log_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["b", *FORMS, "status"])
        for b, st in enumerate(self.status):
            wr.writerow([b, *(repr(float(self.draws[f][b])) for f in FORMS), st])
        return buf.getvalue()


def _one_draw(data: Dataset, main: CrossFit, bcfg: BootstrapConfig, rng: RngStream, b: int,
              keys, groups):
    w = normalize_weights(gen_weights(bcfg.scheme, data.n, rng.child("boot", b, "weights")))
    cfg = main.cfg if bcfg.refit_train is None else replace(main.cfg, train=bcfg.refit_train)
    cf = crossfit_ranks(data, main.family, omega=None, seed=rng.child("boot", b), weights=w,
                        cfg=cfg, folds=main.ranks.folds,
                        init_models=main.models if bcfg.warm_start else None)
    out = []
    for om, g in keys:
        rs = cf.ranks.with_omega(om)
        if g is None:
            out.append(weighted_rho(rs, w))
        else:
            m = groups[g]
            out.append(weighted_rho(rs.subset(m), w[m]))
    return out


def bootstrap_rho(data: Dataset, main: CrossFit, bcfg: BootstrapConfig | None = None,
                  seed: int | RngStream = 0, omegas=None, groups: dict | None = None) -> dict:
    """Bootstrap runs keyed by omega, reusing ``main``'s fold plan.

    Several omegas share each refit since ranks are affine in omega.
    ``groups`` maps names to row masks; their runs are keyed ``(omega, name)``
    and use the same refits restricted to the subgroup.  Draws that fail are
    skipped; more than 5% failures aborts the run.
    """
    bcfg = bcfg or BootstrapConfig()
    rng = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    if omegas is None:
        omegas = [main.ranks.omega]
    groups = dict(groups or {})
    keys = [(om, None) for om in omegas] + [(om, g) for om in omegas for g in groups]
    if bcfg.B < MIN_B_FOR_SE:
        warnings.warn(f"B={bcfg.B} is below {MIN_B_FOR_SE}; the SE is unreliable",
                      RuntimeWarning, stacklevel=2)
    mains = []
    for om, g in keys:
        rs = main.ranks.with_omega(om)
        mains.append(estimates(rs if g is None else rs.subset(groups[g])))
    draws = [{f: np.full(bcfg.B, np.nan) for f in FORMS} for _ in keys]
    status = []
    for b in range(bcfg.B):
        try:
            res = _one_draw(data, main, bcfg, rng, b, keys, groups)
        except (FoldFitError, ZeroDivisionError, ValueError) as e:
            log.warning("bootstrap draw %d failed: %s", b, e)
            status.append(f"failed: {type(e).__name__}")
            continue
        for j, r in enumerate(res):
            for f in FORMS:
                draws[j][f][b] = r[f]
        status.append("ok")
    failed = sum(s != "ok" for s in status)
    if failed > MAX_FAIL_FRACTION * bcfg.B:
        raise BootstrapFailed(f"{failed} of {bcfg.B} bootstrap draws failed")
    ok = np.array([s == "ok" for s in status])
    heuristic = main.ranks.discrete
    out = {}
    for j, (om, g) in enumerate(keys):
        n_eff = data.n if g is None else int(np.count_nonzero(groups[g]))
        run = BootstrapRun(bcfg.B, bcfg.alpha, mains[j], draws[j], list(status),
                           heuristic=heuristic)
        for f in FORMS:
            se, aci, _, t = se_and_aci(draws[j][f][ok], mains[j][f], n_eff, bcfg.alpha)
            run.se[f], run.aci[f], run.t_hat[f] = se, aci, t
        out[om if g is None else (om, g)] = run
    return out
