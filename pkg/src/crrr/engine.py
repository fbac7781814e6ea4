"""Ranks, cross-fitting and the conditional rank-rank estimators."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .data import Dataset, OutcomeKind
from .dctm import DEFAULT_ORDER, fit_dctm
from .ddctm import fit_ddctm
from .distreg import DEFAULT_GRID, fit_dr_continuous, fit_dr_discrete
from .numeric import RngStream

log = logging.getLogger(__name__)

FAMILIES = ("dctm", "ddctm", "dr")
DEFAULT_FOLDS = 3


class FoldFitError(RuntimeError):
    def __init__(self, fold: int, cause: Exception):
        super().__init__(f"fold {fold} fit failed: {cause}")
        self.fold = fold
        self.cause = cause


@dataclass(frozen=True)
class FoldPlan:
    K: int
    assignment: np.ndarray

    @classmethod
    def make(cls, n: int, K: int, rng: RngStream) -> "FoldPlan":
        if K < 2 or n < K:
            raise ValueError(f"need K >= 2 and n >= K (n={n}, K={K})")
        perm = rng.generator().permutation(n)
        a = np.empty(n, dtype=int)
        a[perm] = np.arange(n) % K
        return cls(K, a)

    def test_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def train_idx(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != k)


@dataclass
class RankSet:
    """Out-of-fold CDF values; ranks for any omega follow by mixing F and F-."""

    fy: np.ndarray
    fy_left: np.ndarray
    fw: np.ndarray
    fw_left: np.ndarray
    omega: float | None = None
    folds: FoldPlan | None = None

    def with_omega(self, omega: float | None) -> "RankSet":
        return replace(self, omega=omega)

    @property
    def discrete(self) -> bool:
        return not (np.array_equal(self.fy, self.fy_left) and np.array_equal(self.fw, self.fw_left))

    def _om(self):
        return 1.0 if self.omega is None else self.omega

    @property
    def u(self) -> np.ndarray:
        return omega_rank(self.fy, self.fy_left, self._om())

    @property
    def v(self) -> np.ndarray:
        return omega_rank(self.fw, self.fw_left, self._om())

    def subset(self, mask) -> "RankSet":
        m = np.asarray(mask)
        return RankSet(self.fy[m], self.fy_left[m], self.fw[m], self.fw_left[m], self.omega, None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["index", "u_hat", "v_hat", "fold", "omega"])
        u, v = self.u, self.v
        fold = self.folds.assignment if self.folds is not None else np.full(u.size, -1)
        om = "" if self.omega is None else repr(float(self.omega))
        for i in range(u.size):
            wr.writerow([i, repr(float(u[i])), repr(float(v[i])), int(fold[i]), om])
        return buf.getvalue()


def marginal_ranks(r, omega: float = 1.0) -> np.ndarray:
    """Tie-broken positional ranks over n.

    omega = 1 gives the largest position #{r_j <= r_i}/n, omega = 0 the
    smallest (#{r_j < r_i} + 1)/n, and omega = 0.5 the mid-rank.  Distinct
    values get i/n for every omega.
    """
    r = np.asarray(r, dtype=float).ravel()
    if r.size == 0:
        raise ValueError("marginal_ranks of an empty vector")
    s = np.sort(r)
    n = r.size
    le = np.searchsorted(s, r, side="right")
    lt = np.searchsorted(s, r, side="left")
    return (omega * le + (1.0 - omega) * (lt + 1)) / n


def omega_rank(F, F_left, omega: float):
    F = np.asarray(F, dtype=float)
    F_left = np.asarray(F_left, dtype=float)
    if not 0.0 <= omega <= 1.0:
        raise ValueError("omega must lie in [0, 1]")
    if np.any(F_left > F + 1e-12):
        raise ValueError("left limit exceeds the CDF value")
    # Equal limits return F itself so omega has no effect at all where there are no ties.
    out = np.where(F == F_left, F, omega * F + (1.0 - omega) * F_left)
    return float(out) if out.ndim == 0 else out


# -- estimators --------------------------------------------------------------


def _uv(ranks):
    if isinstance(ranks, RankSet):
        return ranks.u, ranks.v
    u, v = ranks
    return np.asarray(u, dtype=float), np.asarray(v, dtype=float)


def _weighted(u, v, weights):
    w = np.ones(u.size) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != u.shape:
        raise ValueError("weights must match the rank vectors")
    sw = np.sum(w)
    if sw <= 0:
        raise ValueError("weights sum to zero")
    return w, sw


def rho_ols(ranks, weights=None) -> float:
    """Slope of U on V; ``weights`` replaces every moment by its weighted analogue."""
    u, v = _uv(ranks)
    w, sw = _weighted(u, v, weights)
    du = u - np.sum(w * u) / sw
    dv = v - np.sum(w * v) / sw
    den = np.sum(w * (dv * dv))
    if den <= 0:
        raise ZeroDivisionError("V ranks are constant")
    return float(np.sum(w * (du * dv)) / den)


def rho_corr(ranks, weights=None) -> float:
    u, v = _uv(ranks)
    w, sw = _weighted(u, v, weights)
    du = u - np.sum(w * u) / sw
    dv = v - np.sum(w * v) / sw
    den = np.sqrt(np.sum(w * (du * du)) * np.sum(w * (dv * dv)))
    if den <= 0:
        raise ZeroDivisionError("zero rank variance")
    return float(np.sum(w * (du * dv)) / den)


def rho_cov(ranks, weights=None) -> float:
    """12 * mean(w (U - 1/2)(V - 1/2)), with weights normalised to mean one."""
    u, v = _uv(ranks)
    w, sw = _weighted(u, v, weights)
    return float(12.0 * np.sum(w * ((u - 0.5) * (v - 0.5))) / sw)


def estimates(ranks, weights=None) -> dict:
    return {"rho_ols": rho_ols(ranks, weights), "rho_corr": rho_corr(ranks, weights),
            "rho_cov": rho_cov(ranks, weights)}


def rrr_slope(y, w, omega: float = 1.0) -> float:
    """Slope of child marginal rank on parent marginal rank."""
    return rho_ols((marginal_ranks(y, omega), marginal_ranks(w, omega)))


def spearman_rescale(rho: float, sd_u: float, sd_v: float) -> float:
    if sd_u <= 0 or sd_v <= 0:
        raise ZeroDivisionError("rank standard deviations must be positive")
    return rho * sd_v / sd_u


# -- cross-fitting -------------------------------------------------------------


@dataclass
class FitConfig:
    """What to fit for one outcome; shared by the Y- and W-models."""

    train: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    J: int = DEFAULT_ORDER
    M: int = DEFAULT_GRID
    class_weights: str | None = None

    def to_dict(self) -> dict:
        return {"train": self.train.to_dict(), "J": self.J, "M": self.M,
                "class_weights": self.class_weights}

    @classmethod
    def from_dict(cls, d: dict) -> "FitConfig":
        d = dict(d)
        tr = nn.TrainConfig.from_dict(d.pop("train", {}))
        return cls(train=tr, **d)


def resolve_family(family: str, kind: OutcomeKind) -> str:
    if family not in FAMILIES:
        raise ValueError(f"unknown estimator family {family!r}")
    if family == "dr":
        return "dr" if kind.continuous else "dr-discrete"
    return "dctm" if kind.continuous else "ddctm"


def fit_outcome(family: str, kind: OutcomeKind, r, x, cfg: FitConfig, weights=None,
                rng: RngStream | None = None, init=None):
    """Fit the conditional-CDF model for one outcome."""
    fam = resolve_family(family, kind)
    rng = rng or RngStream(0)
    if fam == "dctm":
        return fit_dctm(r, x, cfg.train, cfg.J, weights, rng, init)
    if fam == "ddctm":
        return fit_ddctm(r, x, cfg.train, kind.categories, weights, cfg.class_weights, rng, init)
    if fam == "dr":
        return fit_dr_continuous(r, x, cfg.M, weights, init)
    return fit_dr_discrete(r, x, kind.categories, weights, init)


@dataclass
class CrossFit:
    ranks: RankSet
    models: list  # per fold: (y_model, w_model)
    family: str
    cfg: FitConfig


def crossfit_ranks(data: Dataset, family: str = "dctm", K: int = DEFAULT_FOLDS,
                   omega: float | None = None, seed: int | RngStream = 0, weights=None,
                   cfg: FitConfig | None = None, folds: FoldPlan | None = None,
                   init_models=None) -> CrossFit:
    """Out-of-fold conditional CDF values for Y and W.

    For fold k the Y- and W-models are trained on the complement of fold k
    (with ``weights`` restricted to it) and evaluated on fold k.
    ``init_models`` warm-starts each fold from a previous cross-fit.
    """
    rng = seed if isinstance(seed, RngStream) else RngStream(int(seed))
    cfg = cfg or FitConfig()
    folds = folds or FoldPlan.make(data.n, K, rng.child("folds"))
    n = data.n
    out = {name: np.empty(n) for name in ("fy", "fy_left", "fw", "fw_left")}
    w_all = None if weights is None else np.asarray(weights, dtype=float)
    models = []
    for k in range(folds.K):
        tr, te = folds.train_idx(k), folds.test_idx(k)
        wk = None if w_all is None else w_all[tr]
        init = (None, None) if init_models is None else init_models[k]
        try:
            my = fit_outcome(family, data.y_kind, data.y[tr], data.x[tr], cfg, wk,
                             rng.child("fold", k, "y"), init[0])
            mw = fit_outcome(family, data.w_kind, data.w[tr], data.x[tr], cfg, wk,
                             rng.child("fold", k, "w"), init[1])
        except (nn.TrainingDiverged, ValueError, np.linalg.LinAlgError) as e:
            raise FoldFitError(k, e) from e
        xt = data.x[te]
        out["fy"][te] = my.cdf(data.y[te], xt)
        out["fy_left"][te] = my.cdf_left(data.y[te], xt)
        out["fw"][te] = mw.cdf(data.w[te], xt)
        out["fw_left"][te] = mw.cdf_left(data.w[te], xt)
        models.append((my, mw))
    rs = RankSet(omega=omega, folds=folds, **out)
    return CrossFit(rs, models, family, cfg)


def between_component(rrr: float, rho: float) -> float:
    return rrr - rho


def subgroup_estimates(ranks: RankSet, mask) -> dict:
    """Estimators on a row-filtered RankSet; models are not refitted."""
    return estimates(ranks.subset(mask))
