"""Continuous deep conditional transformation model.

F(y | x) = Phi(T(y, x)),  T(y, x) = sum_j beta_j(x) B_{j,J}(u),
u = sigmoid((y - m) / s), with beta_j(x) = c(x) + sum_{k<=j} softplus(delta_k(x)).

The cumulative-softplus coefficients are nondecreasing in ``j`` for any
network weights, which makes ``T`` nondecreasing in ``y``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import optimize, special

from . import nn
from .data import Standardizer
from .numeric import RngStream, softplus, softplus_inverse, std_normal_cdf

log = logging.getLogger(__name__)

CDF_CLAMP = 1e-12
JACOBIAN_FLOOR = 1e-12
DEFAULT_ORDER = 32


def _bern(u: np.ndarray, J: int) -> np.ndarray:
    k = np.arange(J + 1)
    log_binom = special.gammaln(J + 1) - special.gammaln(k + 1) - special.gammaln(J - k + 1)
    uu = u[..., None]
    return np.exp(log_binom + special.xlogy(k, uu) + special.xlog1py(J - k, -uu))


def _check_u(u, J):
    if J < 1:
        raise ValueError("Bernstein order must be >= 1")
    u = np.asarray(u, dtype=float)
    if np.any((u < 0) | (u > 1)) or np.any(np.isnan(u)):
        raise ValueError("Bernstein basis argument must lie in [0, 1]")
    return u


def bernstein_basis(u, J: int) -> np.ndarray:
    """B_{k,J}(u) for k = 0..J, shape ``u.shape + (J + 1,)``; computed in log space."""
    return _bern(_check_u(u, J), J)


def bernstein_basis_derivative(u, J: int) -> np.ndarray:
    """d/du B_{k,J}(u) = J (B_{k-1,J-1}(u) - B_{k,J-1}(u)), with out-of-range terms zero."""
    lower = _bern(_check_u(u, J), J - 1)
    pad = np.zeros(lower.shape[:-1] + (1,))
    return J * (np.concatenate([pad, lower], axis=-1) - np.concatenate([lower, pad], axis=-1))


@dataclass(frozen=True)
class Normalizer:
    """u = sigmoid((y - m) / s)."""

    m: float
    s: float

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError("normalizer scale must be positive")

    @classmethod
    def from_sample(cls, y) -> "Normalizer":
        q25, q50, q75 = np.quantile(np.asarray(y, dtype=float), [0.25, 0.5, 0.75])
        return cls(float(q50), float(max((q75 - q25) / 1.349, 1e-6)))

    def u(self, y):
        return special.expit((np.asarray(y, dtype=float) - self.m) / self.s)

    def du_dy(self, y):
        u = self.u(y)
        return u * (1.0 - u) / self.s


class DctmAdapter:
    """Per-sample NLL -log phi(T) - log dT/dy for fixed observations."""

    def __init__(self, y, normalizer: Normalizer, J: int):
        u = normalizer.u(y)
        B = bernstein_basis(u, J)
        # T = c + sum_k softplus(delta_k) * tail_k, tail_k = sum_{j>=k} B_j
        self.tail = np.cumsum(B[:, ::-1], axis=1)[:, ::-1][:, 1:]
        lower = _bern(u, J - 1)
        self.dbasis = J * lower * (u * (1.0 - u) / normalizer.s)[:, None]
        self.floored = 0

    def loss_and_grad(self, outputs, idx):
        c, d = outputs[:, 0], outputs[:, 1:]
        sp = softplus(d)
        tail, db = self.tail[idx], self.dbasis[idx]
        T = c + np.einsum("ij,ij->i", sp, tail)
        Tp = np.einsum("ij,ij->i", sp, db)
        ok = Tp > JACOBIAN_FLOOR
        self.floored += int(np.count_nonzero(~ok))
        Tp_f = np.where(ok, Tp, JACOBIAN_FLOOR)
        loss = 0.5 * T * T + 0.5 * np.log(2.0 * np.pi) - np.log(Tp_f)
        g = np.empty_like(outputs)
        g[:, 0] = T
        inv = np.where(ok, 1.0 / Tp_f, 0.0)
        g[:, 1:] = (T[:, None] * tail - inv[:, None] * db) * special.expit(d)
        return loss, g


class DctmModel:
    """Fitted (or initialised) continuous transformation model."""

    kind = "dctm"

    def __init__(self, net: nn.Mlp, normalizer: Normalizer, J: int, standardizer: Standardizer):
        if net.n_out != J + 1:
            raise ValueError("network output width must be J + 1")
        self.net = net
        self.normalizer = normalizer
        self.J = J
        self.standardizer = standardizer
        self.log: nn.TrainLog | None = None

    @classmethod
    def initial(cls, p: int, J: int, normalizer: Normalizer, standardizer: Standardizer,
                cfg: nn.TrainConfig, rng: RngStream) -> "DctmModel":
        net = nn.Mlp([p, *cfg.hidden, J + 1], cfg.activation).init(rng)
        # Start from T ~ 4u - 2, roughly the standard-normal score near the centre.
        net.biases[-1][0] = -2.0
        net.biases[-1][1:] = softplus_inverse(4.0 / J)
        return cls(net, normalizer, J, standardizer)

    def outputs(self, x):
        return self.net.forward(self.standardizer(np.atleast_2d(x)))

    def beta(self, x) -> np.ndarray:
        o = self.outputs(x)
        sp = softplus(o[:, 1:])
        return np.concatenate([o[:, :1], o[:, :1] + np.cumsum(sp, axis=1)], axis=1)

    def _check(self, y, x):
        y = np.asarray(y, dtype=float).ravel()
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("non-finite y or x")
        if x.shape[0] == 1 and y.size > 1:
            x = np.repeat(x, y.size, axis=0)
        if x.shape[0] != y.size:
            raise ValueError("y and x must have matching rows")
        return y, x

    def transform(self, y, x) -> np.ndarray:
        y, x = self._check(y, x)
        B = bernstein_basis(self.normalizer.u(y), self.J)
        return np.einsum("ij,ij->i", self.beta(x), B)

    def transform_dy(self, y, x) -> np.ndarray:
        y, x = self._check(y, x)
        u = self.normalizer.u(y)
        inc = np.diff(self.beta(x), axis=1)
        lower = _bern(u, self.J - 1)
        return self.J * np.einsum("ij,ij->i", inc, lower) * u * (1.0 - u) / self.normalizer.s

    def cdf(self, y, x) -> np.ndarray:
        return np.clip(std_normal_cdf(self.transform(y, x)), CDF_CLAMP, 1.0 - CDF_CLAMP)

    cdf_left = cdf

    def nll(self, y, x) -> np.ndarray:
        y, x = self._check(y, x)
        ad = DctmAdapter(y, self.normalizer, self.J)
        loss, _ = ad.loss_and_grad(self.outputs(x), np.arange(y.size))
        return loss

    def adapter(self, y) -> DctmAdapter:
        return DctmAdapter(y, self.normalizer, self.J)

    def header(self) -> dict:
        return {"kind": self.kind, "m": self.normalizer.m, "s": self.normalizer.s, "J": self.J,
                "standardizer": self.standardizer.to_dict()}

    def dumps(self) -> str:
        return nn.dumps(self.header(), self.net)

    @classmethod
    def loads(cls, text: str) -> "DctmModel":
        h, net = nn.loads(text)
        if h.get("kind") != cls.kind:
            raise ValueError("not a DCTM dump")
        return cls(net, Normalizer(h["m"], h["s"]), int(h["J"]),
                   Standardizer.from_dict(h["standardizer"]))


def marginal_outputs(adapter: DctmAdapter, J: int, weights=None) -> np.ndarray:
    """Output-layer values of the best x-free transformation (weighted MLE).

    Used as the starting bias so the network only has to learn how the
    transformation moves with x.
    """
    n = adapter.tail.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    idx = np.arange(n)

    def f(o):
        loss, g = adapter.loss_and_grad(np.broadcast_to(o, (n, J + 1)), idx)
        return float(w @ loss), w @ g

    start = np.r_[-2.0, np.full(J, softplus_inverse(4.0 / J))]
    res = optimize.minimize(f, start, jac=True, method="L-BFGS-B",
                            options={"maxiter": 500})
    adapter.floored = 0
    return res.x if np.all(np.isfinite(res.x)) and np.isfinite(res.fun) else start


def fit_dctm(r, x, cfg: nn.TrainConfig | None = None, J: int = DEFAULT_ORDER, weights=None,
             rng: RngStream | None = None, init: DctmModel | None = None) -> DctmModel:
    """Fit a DCTM by (weighted) maximum likelihood with early stopping.

    ``init`` warm-starts from an existing model and reuses its normalizer
    and covariate standardizer.
    """
    cfg = cfg or nn.TrainConfig()
    rng = rng or RngStream(0)
    r = np.asarray(r, dtype=float).ravel()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != r.size:
        x = x.reshape(r.size, -1)
    if r.size < 200:
        warnings.warn(f"fit_dctm on only {r.size} observations", RuntimeWarning, stacklevel=2)
    if init is None:
        model = DctmModel.initial(x.shape[1], J, Normalizer.from_sample(r), Standardizer.fit(x),
                                  cfg, rng.child("init"))
        model.net.biases[-1][:] = marginal_outputs(model.adapter(r), J, weights)
        # Start exactly at the x-free fit; the network then learns the x-dependence.
        model.net.weights[-1][:] = 0.0
    else:
        model = DctmModel(init.net.copy(), init.normalizer, init.J, init.standardizer)
    adapter = model.adapter(r)
    net, tlog = nn.train(model.net, model.standardizer(x), adapter, cfg, rng.child("train"),
                         weights)
    fitted = DctmModel(net, model.normalizer, model.J, model.standardizer)
    fitted.log = tlog
    if tlog.floored:
        log.info("DCTM fit: %d Jacobian evaluations floored", tlog.floored)
    return fitted
