"""Random streams, special functions, quantiles and uniformity tests."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats


@dataclass(frozen=True)
class RngStream:
    """Splittable, seed-addressed random stream.

    A stream is identified by a master ``seed`` and a tuple ``key`` of
    non-negative integers.  ``child(*ids)`` derives an independent substream,
    so Monte-Carlo repetitions, folds, bootstrap draws and network
    initialisations each own a stream that depends only on its address.
    """

    seed: int
    key: tuple[int, ...] = field(default_factory=tuple)

    def child(self, *ids: int | str) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(_as_key(i) for i in ids))

    @property
    def stream_id(self) -> int:
        # Stable 64-bit summary of the key, for manifests and logs.
        ss = np.random.SeedSequence(entropy=0, spawn_key=self.key)
        return int(ss.generate_state(1, dtype=np.uint64)[0])

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(entropy=int(self.seed), spawn_key=self.key)
        return np.random.Generator(np.random.PCG64(ss))


def _as_key(i: int | str) -> int:
    if isinstance(i, str):
        # Deterministic across processes, unlike hash().
        return int.from_bytes(i.encode("utf-8")[:8].ljust(8, b"\0"), "little")
    if i < 0:
        raise ValueError("stream ids must be non-negative")
    return int(i)


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float

    __test__ = False  # not a pytest class


def std_normal_cdf(z):
    """Standard normal CDF."""
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("std_normal_cdf requires finite input")
    out = special.ndtr(z)
    return float(out) if out.ndim == 0 else out


def std_normal_logpdf(z):
    z = np.asarray(z, dtype=float)
    return -0.5 * z * z - 0.5 * np.log(2.0 * np.pi)


def std_normal_quantile(p):
    """Inverse of :func:`std_normal_cdf` on the open unit interval."""
    p = np.asarray(p, dtype=float)
    if np.any((p <= 0.0) | (p >= 1.0)) or np.any(np.isnan(p)):
        raise ValueError("std_normal_quantile requires 0 < p < 1")
    out = special.ndtri(p)
    return float(out) if out.ndim == 0 else out


def logistic_cdf(t):
    out = special.expit(np.asarray(t, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


def logit(p):
    return special.logit(np.asarray(p, dtype=float))


def softplus(a):
    """log(1 + e^a) in the overflow-free form max(a, 0) + log1p(e^-|a|)."""
    a = np.asarray(a, dtype=float)
    out = np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(a)))
    return float(out) if out.ndim == 0 else out


def softplus_inverse(v):
    v = np.asarray(v, dtype=float)
    return v + np.log(-np.expm1(-v))


def empirical_quantile(values, p):
    """Order-statistic quantile, linear between neighbours at h = (n - 1) p."""
    values = np.asarray(values, dtype=float).ravel()
    if values.size == 0:
        raise ValueError("empirical_quantile of an empty vector")
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr < 0) | (p_arr > 1)):
        raise ValueError("quantile level must lie in [0, 1]")
    out = np.quantile(values, p_arr, method="linear")
    return float(out) if np.ndim(out) == 0 else out


def ks_uniform_test(pit) -> TestResult:
    """One-sample Kolmogorov-Smirnov test against Unif(0, 1).

    The p-value uses the limiting Kolmogorov distribution evaluated at
    sqrt(n) * D.
    """
    x = np.sort(np.asarray(pit, dtype=float).ravel())
    n = x.size
    if n < 10:
        raise ValueError("ks_uniform_test needs at least 10 values")
    if x[0] < 0.0 or x[-1] > 1.0 or np.isnan(x).any():
        raise ValueError("PIT values must lie in [0, 1]")
    i = np.arange(1, n + 1)
    d = max(np.max(i / n - x), np.max(x - (i - 1) / n))
    p = float(special.kolmogorov(np.sqrt(n) * d))
    return TestResult(float(d), min(max(p, 0.0), 1.0))


def chi2_uniform_test(pit, bins: int = 10) -> TestResult:
    """Pearson chi-square test of equal-width bin counts on [0, 1]."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    x = np.asarray(pit, dtype=float).ravel()
    n = x.size
    if n < 5 * bins:
        raise ValueError(f"need n >= 5*bins = {5 * bins}, got {n}")
    idx = np.minimum((x * bins).astype(int), bins - 1)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    expected = n / bins
    stat = float(np.sum((counts - expected) ** 2) / expected)
    p = float(stats.chi2.sf(stat, bins - 1))
    return TestResult(stat, min(max(p, 0.0), 1.0))
