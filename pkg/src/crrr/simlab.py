"""Simulation designs, their ground truths, and the Monte-Carlo driver.

Four designs are available:

``simple-normal``
    X ~ Bernoulli(1/2); (Y, W) | X bivariate normal with means
    (165, 180 - delta X), standard deviations 4 and correlation 0.6.
``complex-continuous``
    X ~ Unif[-1, 1]^8 with nonlinear location/scale functions and a
    skewing transform g(z) = z + a softplus(b z) of correlated latent normals.
``simple-discrete`` / ``complex-discrete``
    The continuous designs cut into 8 ordered categories with right-closed
    bins (c_k, c_{k+1}].
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np
from scipy import stats
from scipy.special import expit

from .data import CONTINUOUS, Dataset, ordinal
from .engine import (CrossFit, FitConfig, crossfit_ranks, estimates, rho_ols, spearman_rescale)
from . import nn
from .numeric import RngStream, chi2_uniform_test, ks_uniform_test, softplus, std_normal_cdf

log = logging.getLogger(__name__)

KINDS = ("simple-normal", "complex-continuous", "simple-discrete", "complex-discrete")
N_CATEGORIES = 8
SIMPLE_MEANS = (165.0, 180.0)
SIMPLE_SD = 4.0
SIMPLE_RHO = 0.6
CUTOFF_FIXTURE = "complex_discrete_cutoffs.json"


@dataclass(frozen=True)
class DgpSpec:
    kind: str = "simple-normal"
    delta: float = 0.0
    rho0: float = 0.6
    p: int = 8
    alpha_y: float = 0.8
    beta_y: float = 1.2
    alpha_w: float = 0.6
    beta_w: float = 1.0
    cutoffs_y: tuple | None = None
    cutoffs_w: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown design {self.kind!r}; expected one of {KINDS}")
        for c in (self.cutoffs_y, self.cutoffs_w):
            if c is not None and np.any(np.diff(np.asarray(c, dtype=float)) <= 0):
                raise ValueError("cutoffs must be strictly ascending")

    @property
    def discrete(self) -> bool:
        return self.kind.endswith("discrete")

    def resolved(self) -> "DgpSpec":
        """Fill in default cutoffs for the discrete designs."""
        if not self.discrete or (self.cutoffs_y is not None and self.cutoffs_w is not None):
            return self
        cy, cw = simple_discrete_cutoffs() if self.kind == "simple-discrete" \
            else complex_discrete_cutoffs()
        return DgpSpec(**{**asdict(self), "cutoffs_y": tuple(map(float, cy)),
                          "cutoffs_w": tuple(map(float, cw))})

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("cutoffs_y", "cutoffs_w"):
            if d[k] is not None:
                d[k] = list(d[k])
        return d


# -- designs -------------------------------------------------------------------


def _corr_normals(n, rho, g):
    L = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    return g.standard_normal((n, 2)) @ L.T


def gen_simple_normal(delta: float, n: int, rng: RngStream) -> Dataset:
    g = rng.generator()
    x = (g.random(n) < 0.5).astype(float)
    z = SIMPLE_SD * _corr_normals(n, SIMPLE_RHO, g)
    y = SIMPLE_MEANS[0] + z[:, 0]
    w = SIMPLE_MEANS[1] - delta * x + z[:, 1]
    return Dataset(y, w, x[:, None], columns=["x1"])


def skew(z, a: float, b: float):
    """g(z) = z + a softplus(b z); strictly increasing for a, b >= 0."""
    return z + a * softplus(b * np.asarray(z, dtype=float))


def skew_inverse(t, a: float, b: float, iters: int = 60):
    """Solve g(z) = t by safeguarded Newton iterations."""
    t = np.asarray(t, dtype=float)
    # g(z) lies between z and (1 + a b) z + a log 2, which brackets the root.
    z = np.where(t > 0, (t - a * np.log(2.0)) / (1.0 + a * b), t - a * np.log(2.0))
    for _ in range(iters):
        f = skew(z, a, b) - t
        step = f / (1.0 + a * b * expit(b * z))
        z = z - step
        if np.all(np.abs(step) <= 1e-13 * (1.0 + np.abs(z))):
            break
    return z


def complex_components(x: np.ndarray):
    """(m_Y, s_Y, m_W, s_W) at each covariate row."""
    x1, x2, x3, x4, x5, x6, x7, x8 = (x[:, j] for j in range(8))
    m_y = 6.0 * np.sin(np.pi * x1 * x2) + 2.0 * (x3 ** 2 - x4 ** 2)
    m_w = 4.0 * np.cos(np.pi * x1) + 3.0 * x2 * x3
    s_y = np.exp(0.5 + 0.6 * x5 + 0.5 * x6 * x7 - 0.3 * x8)
    s_w = np.exp(0.3 + 0.5 * x4 - 0.5 * x5 * x6)
    return m_y, s_y, m_w, s_w


def heterogeneity_index(x: np.ndarray) -> np.ndarray:
    """One-dimensional summary used only to pick covariate groups for plots."""
    return (0.8 * x[:, 0] * x[:, 1] + 0.6 * (x[:, 2] ** 2 - x[:, 3] ** 2)
            + 0.8 * np.sin(np.pi * x[:, 4]) + 0.6 * x[:, 5] * x[:, 6])


def gen_complex_continuous(n: int, rng: RngStream, spec: DgpSpec | None = None) -> Dataset:
    spec = spec or DgpSpec("complex-continuous")
    if spec.p != 8:
        raise ValueError("the complex design is defined for p = 8")
    g = rng.generator()
    x = g.uniform(-1.0, 1.0, (n, spec.p))
    z = _corr_normals(n, spec.rho0, g)
    m_y, s_y, m_w, s_w = complex_components(x)
    y = m_y + s_y * skew(z[:, 0], spec.alpha_y, spec.beta_y)
    w = m_w + s_w * skew(z[:, 1], spec.alpha_w, spec.beta_w)
    return Dataset(y, w, x)


def discretize(y, cutoffs) -> np.ndarray:
    """Category #{k: c_k < y}, i.e. right-closed bins."""
    c = np.asarray(cutoffs, dtype=float)
    if np.any(np.diff(c) <= 0):
        raise ValueError("cutoffs must be strictly ascending")
    return np.searchsorted(c, np.asarray(y, dtype=float), side="left")


def simple_discrete_cutoffs():
    """Interior octiles of the baseline marginals N(165, 4^2) and N(180, 4^2)."""
    q = stats.norm.ppf(np.arange(1, N_CATEGORIES) / N_CATEGORIES)
    return SIMPLE_MEANS[0] + SIMPLE_SD * q, SIMPLE_MEANS[1] + SIMPLE_SD * q


def _fixture() -> dict:
    return json.loads(resources.files("crrr.fixtures").joinpath(CUTOFF_FIXTURE).read_text())


def complex_discrete_cutoffs(which: str = "default"):
    """Pinned cut points for the complex discrete design (see the fixture file)."""
    d = _fixture()
    entry = d["cutoffs"][d["default"] if which == "default" else which]
    return np.asarray(entry["y"], dtype=float), np.asarray(entry["w"], dtype=float)


def octile_calibration_cutoffs(n: int = 1_000_000, seed: int = 20240601):
    """Octiles of Y and W from one large calibration draw of the complex design."""
    d = gen_complex_continuous(n, RngStream(seed, (0,)))
    q = np.arange(1, N_CATEGORIES) / N_CATEGORIES
    return np.quantile(d.y, q), np.quantile(d.w, q)


def generate(spec: DgpSpec, n: int, rng: RngStream) -> Dataset:
    spec = spec.resolved()
    if spec.kind in ("simple-normal", "simple-discrete"):
        d = gen_simple_normal(spec.delta, n, rng)
    else:
        d = gen_complex_continuous(n, rng, spec)
    if not spec.discrete:
        return d
    K = len(spec.cutoffs_y) + 1
    return Dataset(discretize(d.y, spec.cutoffs_y), discretize(d.w, spec.cutoffs_w), d.x,
                   ordinal(K), ordinal(len(spec.cutoffs_w) + 1), d.columns)


# -- true conditional CDFs -------------------------------------------------------


def true_cdf_y(spec: DgpSpec, y, x):
    x = np.atleast_2d(x)
    if spec.kind.startswith("simple"):
        return std_normal_cdf((np.asarray(y, dtype=float) - SIMPLE_MEANS[0]) / SIMPLE_SD)
    m, s, _, _ = complex_components(x)
    t = np.clip((np.asarray(y, dtype=float) - m) / s, -1e3, 1e3)
    return std_normal_cdf(skew_inverse(t, spec.alpha_y, spec.beta_y))


def true_cdf_w(spec: DgpSpec, w, x):
    x = np.atleast_2d(x)
    if spec.kind.startswith("simple"):
        mu = SIMPLE_MEANS[1] - spec.delta * x[:, 0]
        return std_normal_cdf((np.asarray(w, dtype=float) - mu) / SIMPLE_SD)
    _, _, m, s = complex_components(x)
    t = np.clip((np.asarray(w, dtype=float) - m) / s, -1e3, 1e3)
    return std_normal_cdf(skew_inverse(t, spec.alpha_w, spec.beta_w))


def _category_cdfs(cdf, k, x, cutoffs):
    """(F(k | x), F(k- | x)) for category labels via the continuous CDF at cut points."""
    c = np.asarray(cutoffs, dtype=float)
    k = np.asarray(k).astype(int)
    big = 1e300
    upper = np.where(k < c.size, c[np.minimum(k, c.size - 1)], big)
    lower = np.where(k > 0, c[np.maximum(k - 1, 0)], -big)
    F = np.where(k < c.size, cdf(np.where(k < c.size, upper, 0.0), x), 1.0)
    Fl = np.where(k > 0, cdf(np.where(k > 0, lower, 0.0), x), 0.0)
    return F, Fl


def oracle_ranks(spec: DgpSpec, data: Dataset):
    """(F_Y, F_Y-, F_W, F_W-) at the observed outcomes under the true model."""
    spec = spec.resolved()
    fy = lambda r, x: true_cdf_y(spec, r, x)  # noqa: E731
    fw = lambda r, x: true_cdf_w(spec, r, x)  # noqa: E731
    if not spec.discrete:
        a, b = fy(data.y, data.x), fw(data.w, data.x)
        return a, a, b, b
    Fy, Fyl = _category_cdfs(fy, data.y, data.x, spec.cutoffs_y)
    Fw, Fwl = _category_cdfs(fw, data.w, data.x, spec.cutoffs_w)
    return Fy, Fyl, Fw, Fwl


# -- truths ----------------------------------------------------------------------


def true_rho_simple(rho_p: float) -> float:
    """Conditional Spearman correlation of a bivariate normal: (6/pi) arcsin(rho/2)."""
    if abs(rho_p) > 1:
        raise ValueError("|rho_P| must be <= 1")
    return 6.0 / np.pi * float(np.arcsin(rho_p / 2.0))


def _bvn_rect_table(a, b, rho):
    """P(Z1 <= a_i, Z2 <= b_j) for extended cut vectors (with +-inf ends)."""
    mvn = stats.multivariate_normal(mean=[0.0, 0.0], cov=[[1.0, rho], [rho, 1.0]])
    P = np.zeros((a.size, b.size))
    for i, ai in enumerate(a):
        for j, bj in enumerate(b):
            if ai == -np.inf or bj == -np.inf:
                P[i, j] = 0.0
            elif ai == np.inf:
                P[i, j] = stats.norm.cdf(bj)
            elif bj == np.inf:
                P[i, j] = stats.norm.cdf(ai)
            else:
                P[i, j] = mvn.cdf([ai, bj])
    return P


def _population_slope(cells):
    """OLS slope from (probability, U, V) triples."""
    p = np.concatenate([c[0].ravel() for c in cells])
    u = np.concatenate([c[1].ravel() for c in cells])
    v = np.concatenate([c[2].ravel() for c in cells])
    p = p / p.sum()
    mu, mv = p @ u, p @ v
    return float(p @ ((u - mu) * (v - mv)) / (p @ ((v - mv) ** 2)))


def true_rho_simple_discrete(delta: float, omega: float, cutoffs=None) -> float:
    """Closed form from bivariate-normal rectangle probabilities in each X group."""
    cy, cw = cutoffs if cutoffs is not None else simple_discrete_cutoffs()
    cells = []
    for xv in (0.0, 1.0):
        a = np.concatenate([[-np.inf], (np.asarray(cy) - SIMPLE_MEANS[0]) / SIMPLE_SD, [np.inf]])
        mu_w = SIMPLE_MEANS[1] - delta * xv
        b = np.concatenate([[-np.inf], (np.asarray(cw) - mu_w) / SIMPLE_SD, [np.inf]])
        C = _bvn_rect_table(a, b, SIMPLE_RHO)
        pk = np.diff(np.diff(C, axis=0), axis=1)  # P(Y_d = k, W_d = l | x)
        Fa, Fb = stats.norm.cdf(a), stats.norm.cdf(b)
        U = omega * Fa[1:] + (1 - omega) * Fa[:-1]
        V = omega * Fb[1:] + (1 - omega) * Fb[:-1]
        cells.append((0.5 * np.clip(pk, 0.0, None), np.repeat(U[:, None], V.size, 1),
                      np.repeat(V[None, :], U.size, 0)))
    return _population_slope(cells)


def true_rho_complex_discrete(omegas, cutoffs=None, oracle_n: int = 8_000_000,
                              seed: int = 12345, spec: DgpSpec | None = None,
                              chunk: int = 1_000_000) -> dict:
    """Monte-Carlo truth using the exact conditional CDFs at the cut points.

    The oracle sample is drawn in chunks and only the moment sums are kept,
    so large samples fit in memory.
    """
    spec = spec or DgpSpec("complex-discrete")
    if cutoffs is not None:
        spec = DgpSpec(**{**asdict(spec), "cutoffs_y": tuple(cutoffs[0]),
                          "cutoffs_w": tuple(cutoffs[1])})
    spec = spec.resolved()
    omegas = [float(om) for om in omegas]
    sums = np.zeros((len(omegas), 5))  # n, sum u, sum v, sum uv, sum v^2
    done = 0
    for c in range(-(-oracle_n // chunk)):
        m = min(chunk, oracle_n - done)
        stream = RngStream(seed, (1,)) if oracle_n <= chunk else RngStream(seed, (1, c))
        data = generate(spec, m, stream)
        Fy, Fyl, Fw, Fwl = oracle_ranks(spec, data)
        for j, om in enumerate(omegas):
            u = om * Fy + (1 - om) * Fyl
            v = om * Fw + (1 - om) * Fwl
            # Centre at 1/2 before accumulating to limit cancellation.
            u, v = u - 0.5, v - 0.5
            sums[j] += (m, u.sum(), v.sum(), u @ v, v @ v)
        done += m
    out = {}
    for j, om in enumerate(omegas):
        k, su, sv, suv, svv = sums[j]
        out[om] = float((suv / k - su * sv / k ** 2) / (svv / k - (sv / k) ** 2))
    return out


def truth(spec: DgpSpec, omega: float | None = None, **kw) -> float:
    spec = spec.resolved()
    if spec.kind == "simple-normal":
        return true_rho_simple(SIMPLE_RHO)
    if spec.kind == "complex-continuous":
        return true_rho_simple(spec.rho0)
    om = 1.0 if omega is None else float(omega)
    if spec.kind == "simple-discrete":
        return true_rho_simple_discrete(spec.delta, om, (spec.cutoffs_y, spec.cutoffs_w))
    frozen = _frozen_complex_truth(spec, om)
    if frozen is not None and not kw:
        return frozen
    return true_rho_complex_discrete([om], spec=spec, **kw)[om]


def _frozen_complex_truth(spec: DgpSpec, om: float):
    d = _fixture()
    for entry in d["cutoffs"].values():
        if (np.allclose(entry["y"], spec.cutoffs_y, rtol=0, atol=1e-12)
                and np.allclose(entry["w"], spec.cutoffs_w, rtol=0, atol=1e-12)):
            return entry.get("truth", {}).get(repr(om))
    return None


# -- Monte-Carlo -----------------------------------------------------------------


@dataclass
class McResult:
    estimates: np.ndarray
    truth: float

    @property
    def reps(self) -> int:
        return self.estimates.size

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates))

    @property
    def sd(self) -> float:
        return float(np.std(self.estimates, ddof=1))

    @property
    def mad(self) -> float:
        return float(np.mean(np.abs(self.estimates - self.truth)))

    @property
    def rmse(self) -> float:
        return float(np.sqrt(np.mean((self.estimates - self.truth) ** 2)))

    def row(self) -> dict:
        return {"truth": self.truth, "mean": self.mean, "sd": self.sd, "mad": self.mad,
                "rmse": self.rmse, "reps": self.reps}


@dataclass
class McRun:
    spec: DgpSpec
    family: str
    n: int
    omegas: list
    per_rep: list = field(default_factory=list)  # per rep: {omega: {form: value}}
    truths: dict = field(default_factory=dict)
    ranks: list = field(default_factory=list)  # per-rep RankSets when kept

    def result(self, omega=None, form: str = "rho_ols") -> McResult:
        est = np.array([r[omega][form] for r in self.per_rep])
        return McResult(est, self.truths[omega])

    def table_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["design", "delta", "family", "n", "omega", "form", "truth", "mean", "sd",
                     "mad", "rmse", "reps"])
        for om in self.omegas:
            for form in ("rho_ols", "rho_corr", "rho_cov"):
                r = self.result(om, form).row()
                wr.writerow([self.spec.kind, repr(float(self.spec.delta)), self.family, self.n,
                             "" if om is None else repr(float(om)), form,
                             *(repr(float(r[k])) for k in ("truth", "mean", "sd", "mad", "rmse")),
                             r["reps"]])
        return buf.getvalue()


def design_fit_config(spec: DgpSpec) -> FitConfig:
    """Training settings used for a design in the Monte-Carlo runs.

    The complex designs use a small tanh network; the default 2x64 relu
    backbone overfits their nonlinear location/scale and biases the slope
    down by ~0.04 at n = 50k.
    """
    if spec.kind.startswith("complex"):
        return FitConfig(train=nn.TrainConfig(activation="tanh", learning_rate=3e-3, hidden=(16, 16)))
    return FitConfig()


def default_family(spec: DgpSpec) -> str:
    return "ddctm" if spec.discrete else "dctm"


def mc_run(spec: DgpSpec, family: str, reps: int, n: int, seed: int = 0, omegas=None,
           cfg: FitConfig | None = None, K: int = 3, keep_ranks: bool = False) -> McRun:
    """Independent repetitions, each with its own substream; ranks shared across omegas."""
    if reps < 2:
        raise ValueError("mc_run needs reps >= 2")
    spec = spec.resolved()
    omegas = list(omegas) if omegas is not None else ([0.0, 0.5, 1.0] if spec.discrete else [None])
    run = McRun(spec, family, n, omegas)
    run.truths = {om: truth(spec, om) for om in omegas}
    master = RngStream(seed)
    for r in range(reps):
        rr = master.child("rep", r)
        data = generate(spec, n, rr.child("data"))
        cf = crossfit_ranks(data, family, K=K, seed=rr.child("fit"), cfg=cfg)
        run.per_rep.append({om: estimates(cf.ranks.with_omega(om)) for om in omegas})
        if keep_ranks:
            run.ranks.append(cf.ranks)
        log.info("rep %d/%d: %s", r + 1, reps,
                 {om: round(v["rho_ols"], 5) for om, v in run.per_rep[-1].items()})
    return run


def omega_sweep(cf: CrossFit, grid, truth_fn=None) -> list[dict]:
    """Estimates on a fixed cross-fit for each omega on the grid."""
    rows = []
    for om in grid:
        if not 0.0 <= om <= 1.0:
            raise ValueError("omega grid must lie in [0, 1]")
        rs = cf.ranks.with_omega(float(om))
        u, v = rs.u, rs.v
        rc = rho_ols(rs)
        su, sv = float(np.std(u)), float(np.std(v))
        rows.append({"omega": float(om), "rho_c": rc, "rho_s": spearman_rescale(rc, su, sv),
                     "sd_ratio": su / sv,
                     "rho_true": None if truth_fn is None else float(truth_fn(float(om)))})
    return rows


def rows_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    wr = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    wr.writeheader()
    for r in rows:
        wr.writerow({k: ("" if v is None else (repr(float(v)) if isinstance(v, float) else v))
                     for k, v in r.items()})
    return buf.getvalue()


def pit_report(cells: dict, bins: int = 10) -> list[dict]:
    """KS and chi-square p-values, mean and variance for each named PIT vector."""
    rows = []
    for name, pit in cells.items():
        pit = np.asarray(pit, dtype=float)
        if pit.size == 0:
            raise ValueError(f"empty PIT cell {name!r}")
        ks = ks_uniform_test(pit)
        chi = chi2_uniform_test(pit, bins)
        rows.append({"cell": name, "n": int(pit.size), "ks_p": ks.p_value, "chi2_p": chi.p_value,
                     "mean": float(pit.mean()), "var": float(pit.var())})
    return rows


def pit_cells_by_group(ranks, x_group, method: str) -> dict:
    """Y- and W-PIT split by a discrete grouping covariate."""
    out = {}
    g = np.asarray(x_group)
    for val in np.unique(g):
        m = g == val
        out[f"Y|X={val:g}|{method}"] = ranks.fy[m]
        out[f"W|X={val:g}|{method}"] = ranks.fw[m]
    return out
