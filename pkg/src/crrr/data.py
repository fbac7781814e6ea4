"""Dataset container and the conditional-CDF model contract."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np


@dataclass(frozen=True)
class OutcomeKind:
    """``categories is None`` for a continuous outcome, else the ordinal K."""

    categories: int | None = None

    @property
    def continuous(self) -> bool:
        return self.categories is None

    def to_json(self):
        return "continuous" if self.continuous else {"ordinal": self.categories}

    @classmethod
    def parse(cls, v) -> "OutcomeKind":
        if v is None or v == "continuous":
            return cls(None)
        if isinstance(v, dict):
            return cls(int(v["ordinal"]))
        if isinstance(v, int):
            return cls(v)
        raise ValueError(f"unrecognised outcome kind {v!r}")


CONTINUOUS = OutcomeKind(None)


def ordinal(k: int) -> OutcomeKind:
    if k < 2:
        raise ValueError("an ordinal outcome needs at least 2 categories")
    return OutcomeKind(int(k))


@dataclass
class Dataset:
    """Child outcome ``y``, parent outcome ``w`` and covariates ``x`` (n x p)."""

    y: np.ndarray
    w: np.ndarray
    x: np.ndarray
    y_kind: OutcomeKind = CONTINUOUS
    w_kind: OutcomeKind = CONTINUOUS
    columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.w = np.asarray(self.w, dtype=float).ravel()
        x = np.asarray(self.x, dtype=float)
        self.x = x[:, None] if x.ndim == 1 else x
        n = self.y.size
        if self.w.size != n or self.x.shape[0] != n:
            raise ValueError("y, w and x must have the same number of rows")
        for name, v, kind in (("y", self.y, self.y_kind), ("w", self.w, self.w_kind)):
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} contains non-finite values")
            if not kind.continuous:
                if np.any(v != np.round(v)) or v.min() < 0 or v.max() > kind.categories - 1:
                    raise ValueError(f"{name} must be integer coded 0..{kind.categories - 1}")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("x contains non-finite values")
        if not self.columns:
            self.columns = [f"x{j + 1}" for j in range(self.x.shape[1])]

    @property
    def n(self) -> int:
        return self.y.size

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.y[idx], self.w[idx], self.x[idx], self.y_kind, self.w_kind,
                       list(self.columns))


class ConditionalCdfModel(Protocol):
    """F(r | x) and its left limit F(r- | x), vectorised over rows."""

    def cdf(self, r: np.ndarray, x: np.ndarray) -> np.ndarray:
        ...

    def cdf_left(self, r: np.ndarray, x: np.ndarray) -> np.ndarray:
        ...


class Standardizer:
    """Column-wise centring and scaling frozen from training covariates."""

    def __init__(self, mean: np.ndarray, scale: np.ndarray):
        self.mean = np.asarray(mean, dtype=float)
        self.scale = np.asarray(scale, dtype=float)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        sd = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["scale"])
