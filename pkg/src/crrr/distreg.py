"""Distribution-regression baseline: one weighted logit per threshold.

Continuous outcomes use thresholds on a grid of sample quantiles, with
linear interpolation inside the grid and link-scale extrapolation outside.
Ordinal outcomes use one logit per category boundary followed by a
running-maximum rearrangement across categories.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special

from .data import Standardizer
from .numeric import empirical_quantile, softplus

log = logging.getLogger(__name__)

RIDGE = 1e-8
TOL = 1e-8
MAX_ITER = 100
CONST_CLIP = 1e-6
LINK_CLIP = 1e-12
DEFAULT_GRID = 100


@dataclass
class LogitFit:
    """Logistic coefficients (intercept first), or a constant fallback."""

    coef: np.ndarray
    degenerate: bool = False
    const: float | None = None
    iterations: int = 0
    converged: bool = True

    def prob(self, x: np.ndarray) -> np.ndarray:
        if self.degenerate:
            return np.full(x.shape[0], self.const)
        return special.expit(self.coef[0] + x @ self.coef[1:])

    def to_dict(self):
        return {"coef": self.coef.tolist(), "degenerate": self.degenerate, "const": self.const}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["coef"], dtype=float), bool(d["degenerate"]), d["const"])


def fit_logit(labels, x, weights=None, start=None) -> LogitFit:
    """Weighted logistic regression by iteratively reweighted least squares.

    A ridge of 1e-8 keeps the normal equations solvable and each Newton
    step is halved until the penalised likelihood does not decrease.  Iteration stops
    once the largest coefficient change is below 1e-8, or after 100 steps.
    If the weighted label proportion is 0 or 1 the fit is flagged degenerate
    and predicts the clipped proportion everywhere.
    """
    yb = np.asarray(labels, dtype=float).ravel()
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if n < p + 2:
        raise ValueError(f"fit_logit needs n >= p + 2 (n={n}, p={p})")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    sw = w.sum()
    if sw <= 0:
        raise ValueError("weights sum to zero")
    q = float(w @ yb / sw)
    if q <= 0.0 or q >= 1.0:
        return LogitFit(np.zeros(p + 1), True, float(np.clip(q, CONST_CLIP, 1 - CONST_CLIP)))
    A = np.hstack([np.ones((n, 1)), x])
    if start is None:
        beta = np.zeros(p + 1)
        beta[0] = special.logit(q)
    else:
        beta = np.asarray(start, dtype=float).copy()
    ridge = RIDGE * np.eye(p + 1)

    def objective(b):
        eta = A @ b
        return float(w @ (yb * eta - softplus(eta))) - 0.5 * RIDGE * float(b @ b)

    cur = objective(beta)
    converged = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu = special.expit(A @ beta)
        hw = w * mu * (1.0 - mu)
        H = (A * hw[:, None]).T @ A + ridge
        g = A.T @ (w * (yb - mu)) - RIDGE * beta
        step = np.linalg.solve(H, g)
        # Step halving keeps the penalised likelihood increasing; plain Newton
        # overshoots once the curvature collapses under quasi-separation.
        for _ in range(40):
            trial = beta + step
            val = objective(trial)
            if np.isfinite(val) and val >= cur - 1e-12 * abs(cur):
                break
            step = 0.5 * step
        beta, cur = trial, val
        if np.max(np.abs(step)) < TOL:
            converged = True
            break
    if not np.all(np.isfinite(beta)):
        return LogitFit(np.zeros(p + 1), True, float(np.clip(q, CONST_CLIP, 1 - CONST_CLIP)), it,
                        False)
    return LogitFit(beta, False, None, it, converged)


def _monotone_probs(fits, xs) -> np.ndarray:
    q = np.column_stack([f.prob(xs) for f in fits])
    return np.maximum.accumulate(q, axis=1)


class DrContinuousModel:
    kind = "dr"

    def __init__(self, thresholds, fits, standardizer: Standardizer, scale: float):
        self.thresholds = np.asarray(thresholds, dtype=float)
        if np.any(np.diff(self.thresholds) <= 0):
            raise ValueError("thresholds must be strictly ascending")
        self.fits = list(fits)
        self.standardizer = standardizer
        self.scale = float(scale)

    @property
    def M(self) -> int:
        return self.thresholds.size

    def threshold_probs(self, x) -> np.ndarray:
        """Monotonized q_m(x), one row per covariate row."""
        return _monotone_probs(self.fits, self.standardizer(np.atleast_2d(x)))

    def _tail_slope(self, L, side: str):
        t = self.thresholds
        M = t.size
        fallback = np.pi / np.sqrt(3.0) / self.scale
        if M == 1:
            return np.full(L.shape[0], fallback)
        if side == "lo":
            s = (L[:, 1] - L[:, 0]) / (t[1] - t[0])
        else:
            s = (L[:, -1] - L[:, -2]) / (t[-1] - t[-2])
        glob = (L[:, -1] - L[:, 0]) / (t[-1] - t[0])
        s = np.where(s > 0, s, glob)
        return np.where(s > 0, s, fallback)

    def cdf(self, y, x) -> np.ndarray:
        y = np.asarray(y, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 1 and y.size > 1:
            x = np.repeat(x, y.size, axis=0)
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite y or x")
        q = self.threshold_probs(x)
        t = self.thresholds
        rows = np.arange(y.size)
        out = np.empty(y.size)
        lo = y < t[0]
        hi = y > t[-1]
        mid = ~(lo | hi)
        if np.any(mid):
            j = np.clip(np.searchsorted(t, y[mid], side="right") - 1, 0, t.size - 1)
            j1 = np.minimum(j + 1, t.size - 1)
            span = t[j1] - t[j]
            frac = np.where(span > 0, (y[mid] - t[j]) / np.where(span > 0, span, 1.0), 0.0)
            r = rows[mid]
            a, b = q[r, j], q[r, j1]
            # Clamping to the segment ends removes rounding overshoot at the knots.
            out[mid] = np.clip(a + frac * (b - a), a, b)
        if np.any(lo | hi):
            L = special.logit(np.clip(q, LINK_CLIP, 1 - LINK_CLIP))
            # The tails never cross the end probabilities; the bounds only undo
            # the link clipping.
            if np.any(lo):
                s = self._tail_slope(L[lo], "lo")
                out[lo] = np.minimum(special.expit(L[lo, 0] + s * (y[lo] - t[0])), q[lo, 0])
            if np.any(hi):
                s = self._tail_slope(L[hi], "hi")
                out[hi] = np.maximum(special.expit(L[hi, -1] + s * (y[hi] - t[-1])), q[hi, -1])
        return out

    cdf_left = cdf

    def dumps(self) -> str:
        return json.dumps({"kind": self.kind, "thresholds": self.thresholds.tolist(),
                           "fits": [f.to_dict() for f in self.fits], "scale": self.scale,
                           "standardizer": self.standardizer.to_dict()}, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DrContinuousModel":
        d = json.loads(text)
        if d.get("kind") != cls.kind:
            raise ValueError("not a DR dump")
        return cls(d["thresholds"], [LogitFit.from_dict(f) for f in d["fits"]],
                   Standardizer.from_dict(d["standardizer"]), d["scale"])


def threshold_grid(r, M: int) -> np.ndarray:
    """Sample quantiles on an M-point uniform grid over [0.01, 0.99], deduplicated."""
    if M < 1:
        raise ValueError("M must be >= 1")
    probs = np.array([0.5]) if M == 1 else np.linspace(0.01, 0.99, M)
    return np.unique(empirical_quantile(r, probs))


def fit_dr_continuous(r, x, M: int = DEFAULT_GRID, weights=None,
                      init: DrContinuousModel | None = None) -> DrContinuousModel:
    """One logit of 1{r <= t_m} per grid threshold.

    ``init`` reuses that model's thresholds, standardizer and coefficients as
    starting values (bootstrap refits).
    """
    r = np.asarray(r, dtype=float).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != r.size:
        x = x.reshape(r.size, -1)
    if r.size < 10 * M:
        warnings.warn(f"DR grid M={M} on only {r.size} observations", RuntimeWarning, stacklevel=2)
    if init is None:
        t = threshold_grid(r, M)
        if t.size < M:
            log.info("DR grid deduplicated: effective M=%d (requested %d)", t.size, M)
        st = Standardizer.fit(x)
        starts = [None] * t.size
    else:
        t, st = init.thresholds, init.standardizer
        starts = [None if f.degenerate else f.coef for f in init.fits]
    xs = st(x)
    fits = []
    prev = None
    for m, tm in enumerate(t):
        start = starts[m] if starts[m] is not None else prev
        f = fit_logit(r <= tm, xs, weights, start=start)
        fits.append(f)
        prev = None if f.degenerate else f.coef
    sd = float(np.std(r))
    return DrContinuousModel(t, fits, st, sd if sd > 0 else 1.0)


class DrDiscreteModel:
    kind = "dr-discrete"

    def __init__(self, K: int, fits, standardizer: Standardizer):
        if len(fits) != K - 1:
            raise ValueError("need K - 1 category fits")
        self.K = K
        self.fits = list(fits)
        self.standardizer = standardizer

    def cdf_vector(self, x) -> np.ndarray:
        xs = self.standardizer(np.atleast_2d(np.asarray(x, dtype=float)))
        q = np.minimum(_monotone_probs(self.fits, xs), 1.0)
        return np.concatenate([q, np.ones((q.shape[0], 1))], axis=1)

    def _lookup(self, k, x, shift: int):
        k = np.asarray(k, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 1 and k.size > 1:
            x = np.repeat(x, k.size, axis=0)
        F = self.cdf_vector(x)
        kk = np.floor(k).astype(int) - shift
        out = np.where(kk < 0, 0.0, 1.0)
        inside = (kk >= 0) & (kk <= self.K - 1)
        out[inside] = F[np.flatnonzero(inside), kk[inside]]
        return out

    def cdf(self, k, x) -> np.ndarray:
        return self._lookup(k, x, 0)

    def cdf_left(self, k, x) -> np.ndarray:
        return self._lookup(k, x, 1)

    def dumps(self) -> str:
        return json.dumps({"kind": self.kind, "K": self.K, "fits": [f.to_dict() for f in self.fits],
                           "standardizer": self.standardizer.to_dict()}, sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "DrDiscreteModel":
        d = json.loads(text)
        if d.get("kind") != cls.kind:
            raise ValueError("not a discrete DR dump")
        return cls(int(d["K"]), [LogitFit.from_dict(f) for f in d["fits"]],
                   Standardizer.from_dict(d["standardizer"]))


def fit_dr_discrete(k, x, K: int, weights=None, init: DrDiscreteModel | None = None) -> DrDiscreteModel:
    """One logit of 1{k_i <= j} for each j = 0..K-2."""
    k = np.asarray(k).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != k.size:
        x = x.reshape(k.size, -1)
    if K < 2:
        raise ValueError("need K >= 2")
    st = Standardizer.fit(x) if init is None else init.standardizer
    xs = st(x)
    fits = []
    for j in range(K - 1):
        start = None
        if init is not None and not init.fits[j].degenerate:
            start = init.fits[j].coef
        fits.append(fit_logit(k <= j, xs, weights, start=start))
    return DrDiscreteModel(K, fits, st)
