"""Ordinal transformation model: an x-only network emitting a monotone CDF vector.

For K categories the network outputs ``c(x)`` and ``delta_0..delta_{K-2}``;
scores ``s_k = c + sum_{j<=k} softplus(delta_j)`` are nondecreasing and
``F_k = sigmoid(s_k)`` for k < K-1, ``F_{K-1} = 1``.
"""

from __future__ import annotations

import logging
import warnings

import numpy as np
from scipy import special

from . import nn
from .data import Standardizer
from .numeric import RngStream, logit, softplus, softplus_inverse

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def _scores(outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sp = softplus(outputs[:, 1:])
    return outputs[:, :1] + np.cumsum(sp, axis=1), sp


def _log_pmf(outputs: np.ndarray, k: np.ndarray):
    """log p_k and its pieces for observed categories ``k`` (stable differences)."""
    s, sp = _scores(outputs)
    K = outputs.shape[1]
    rows = np.arange(outputs.shape[0])
    top = k <= K - 2
    bot = k >= 1
    a = s[rows, np.minimum(k, K - 2)]
    b = s[rows, np.maximum(k - 1, 0)]
    d = sp[rows, np.minimum(k, K - 2)]
    logp = np.zeros(k.size)
    logp += np.where(top, -softplus(-a), 0.0)          # log sigmoid(s_k)
    logp += np.where(bot, -softplus(b), 0.0)           # log sigmoid(-s_{k-1})
    mid = top & bot
    # sigmoid(a) - sigmoid(b) = sigmoid(a) sigmoid(-b) (1 - e^{-(a-b)}), a - b = softplus(delta_k)
    with np.errstate(divide="ignore"):
        logp += np.where(mid, np.log(-np.expm1(-np.where(mid, d, 1.0))), 0.0)
    return logp, s, sp, a, b, d, top, bot, mid


class DdctmAdapter:
    """Per-sample loss -cw_k log p_k(x)."""

    def __init__(self, k, K: int, class_weights=None):
        self.k = np.asarray(k).astype(int).ravel()
        self.K = K
        self.cw = None if class_weights is None else np.asarray(class_weights, dtype=float)
        self.floored = 0

    def loss_and_grad(self, outputs, idx):
        k = self.k[idx]
        K = self.K
        logp, s, sp, a, b, d, top, bot, mid = _log_pmf(outputs, k)
        ok = logp > np.log(PROB_FLOOR)
        self.floored += int(np.count_nonzero(~ok))
        n = k.size
        rows = np.arange(n)
        # G[:, j] = d log p / d s_j
        G = np.zeros((n, K - 1))
        ga = np.where(top, special.expit(-a), 0.0)
        gb = np.where(bot, -special.expit(b), 0.0)
        np.add.at(G, (rows, np.minimum(k, K - 2)), ga)
        np.add.at(G, (rows, np.maximum(k - 1, 0)), gb)
        tail = np.cumsum(G[:, ::-1], axis=1)[:, ::-1]
        dd = tail * special.expit(outputs[:, 1:])
        extra = np.where(mid, 1.0 / np.expm1(np.where(mid, d, 1.0)), 0.0)
        dd[rows, np.minimum(k, K - 2)] += extra * special.expit(outputs[rows, 1 + np.minimum(k, K - 2)])
        g = np.empty_like(outputs)
        g[:, 0] = G.sum(axis=1)
        g[:, 1:] = dd
        cw = 1.0 if self.cw is None else self.cw[k]
        loss = -cw * np.where(ok, logp, np.log(PROB_FLOOR))
        g *= -(cw * ok)[:, None]
        return loss, g


class DdctmModel:
    kind = "ddctm"

    def __init__(self, net: nn.Mlp, K: int, standardizer: Standardizer):
        if net.n_out != K:
            raise ValueError("network output width must equal K")
        self.net = net
        self.K = K
        self.standardizer = standardizer
        self.log: nn.TrainLog | None = None

    @classmethod
    def initial(cls, p: int, K: int, standardizer: Standardizer, cfg: nn.TrainConfig,
                rng: RngStream, marginal=None) -> "DdctmModel":
        net = nn.Mlp([p, *cfg.hidden, K], cfg.activation).init(rng)
        freq = np.full(K, 1.0 / K) if marginal is None else np.asarray(marginal, dtype=float)
        cum = np.clip(np.cumsum(freq)[:-1], 1e-3, 1 - 1e-3)
        s = logit(cum)
        inc = np.maximum(np.diff(np.concatenate([[s[0] - 1.0], s])), 1e-3)
        net.biases[-1][0] = s[0] - 1.0
        net.biases[-1][1:] = softplus_inverse(inc)
        return cls(net, K, standardizer)

    def outputs(self, x):
        return self.net.forward(self.standardizer(np.atleast_2d(x)))

    def cdf_vector(self, x) -> np.ndarray:
        """P(R <= k | x) for k = 0..K-1, one row per covariate row."""
        s, _ = _scores(self.outputs(x))
        return np.concatenate([special.expit(s), np.ones((s.shape[0], 1))], axis=1)

    def pmf_vector(self, x) -> np.ndarray:
        s, sp = _scores(self.outputs(x))
        n, K = s.shape[0], self.K
        p = np.empty((n, K))
        p[:, 0] = special.expit(s[:, 0])
        p[:, 1:K - 1] = special.expit(s[:, 1:]) * special.expit(-s[:, :-1]) * -np.expm1(-sp[:, 1:])
        p[:, K - 1] = special.expit(-s[:, -1])
        return p

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

    def nll(self, k, x, class_weights=None):
        ad = DdctmAdapter(k, self.K, class_weights)
        loss, _ = ad.loss_and_grad(self.outputs(x), np.arange(np.size(k)))
        return loss

    def header(self):
        return {"kind": self.kind, "K": self.K, "standardizer": self.standardizer.to_dict()}

    def dumps(self) -> str:
        return nn.dumps(self.header(), self.net)

    @classmethod
    def loads(cls, text: str) -> "DdctmModel":
        h, net = nn.loads(text)
        if h.get("kind") != cls.kind:
            raise ValueError("not a dDCTM dump")
        return cls(net, int(h["K"]), Standardizer.from_dict(h["standardizer"]))


def inverse_frequency_weights(k, K: int) -> np.ndarray:
    """Class weights proportional to 1/frequency, normalised to mean 1 over the sample."""
    k = np.asarray(k).astype(int)
    counts = np.bincount(k, minlength=K).astype(float)
    cw = np.where(counts > 0, k.size / np.maximum(counts, 1.0) / K, 0.0)
    return cw / cw[k].mean()


def fit_ddctm(k, x, cfg: nn.TrainConfig | None = None, K: int | None = None, weights=None,
              class_weights=None, rng: RngStream | None = None,
              init: DdctmModel | None = None) -> DdctmModel:
    """Fit the ordinal model by (weighted) maximum likelihood.

    ``class_weights`` is None, "inverse-frequency", or a length-K vector.
    """
    cfg = cfg or nn.TrainConfig()
    rng = rng or RngStream(0)
    k = np.asarray(k).ravel()
    if np.any(k != np.round(k)):
        raise ValueError("ordinal labels must be integers")
    k = k.astype(int)
    K = int(K if K is not None else k.max() + 1)
    if K < 2:
        raise ValueError("need K >= 2")
    if k.min() < 0 or k.max() >= K:
        raise ValueError(f"labels must lie in 0..{K - 1}")
    counts = np.bincount(k, minlength=K)
    if np.any(counts == 0):
        warnings.warn(f"categories {np.flatnonzero(counts == 0).tolist()} absent from training data",
                      RuntimeWarning, stacklevel=2)
    if isinstance(class_weights, str):
        if class_weights != "inverse-frequency":
            raise ValueError(f"unknown class weighting {class_weights!r}")
        class_weights = inverse_frequency_weights(k, K)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != k.size:
        x = x.reshape(k.size, -1)
    if init is None:
        wc = counts if weights is None else np.bincount(k, weights=weights, minlength=K)
        model = DdctmModel.initial(x.shape[1], K, Standardizer.fit(x), cfg, rng.child("init"),
                                   marginal=(wc + 0.5) / (wc + 0.5).sum())
        # Start exactly at the x-free fit; the network then learns the x-dependence.
        model.net.weights[-1][:] = 0.0
    else:
        model = DdctmModel(init.net.copy(), init.K, init.standardizer)
    adapter = DdctmAdapter(k, K, class_weights)
    net, tlog = nn.train(model.net, model.standardizer(x), adapter, cfg, rng.child("train"),
                         weights)
    fitted = DdctmModel(net, K, model.standardizer)
    fitted.log = tlog
    if tlog.floored:
        log.info("dDCTM fit: %d probabilities floored", tlog.floored)
    return fitted
