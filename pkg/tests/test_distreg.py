import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from crrr.distreg import (DrContinuousModel, DrDiscreteModel, fit_dr_continuous,
                          fit_dr_discrete, fit_logit, threshold_grid)


def test_degenerate_labels():
    f = fit_logit(np.ones(50), np.random.default_rng(0).standard_normal((50, 1)))
    assert f.degenerate and f.const == pytest.approx(1 - 1e-6)
    assert np.all(f.prob(np.zeros((3, 1))) == f.const)


def test_known_logit_recovered():
    g = np.random.default_rng(1)
    x = g.standard_normal(100_000)
    y = g.random(x.size) < special.expit(0.3 - 1.2 * x)
    f = fit_logit(y, x)
    assert f.converged
    assert abs(f.coef[0] - 0.3) <= 0.05 and abs(f.coef[1] + 1.2) <= 0.05


def test_duplicate_equals_double_weight():
    g = np.random.default_rng(2)
    x = g.standard_normal((40, 2))
    y = g.random(40) < 0.4
    w = np.ones(40)
    w[5] = 2.0
    a = fit_logit(y, x, w)
    rows = np.r_[np.arange(40), 5]
    b = fit_logit(y[rows], x[rows])
    assert np.allclose(a.coef, b.coef, atol=1e-9)


def test_quasi_separation_does_not_flip_sign():
    # One x-group almost never falls below the threshold; plain Newton overshoots here.
    g = np.random.default_rng(3)
    x = (g.random(20_000) < 0.5).astype(float)
    r = g.standard_normal(x.size) - 12 * x
    f = fit_logit(r <= np.quantile(r, 0.99), (x - 0.5)[:, None] * 2)
    assert f.coef[1] > 0
    p1 = f.prob(np.array([[1.0]]))[0]
    assert p1 > 0.97


def test_threshold_grid():
    r = np.arange(1000.0)
    t = threshold_grid(r, 5)
    assert np.allclose(t, np.quantile(r, np.linspace(0.01, 0.99, 5)))
    assert threshold_grid(r, 1).tolist() == [np.quantile(r, 0.5)]
    assert threshold_grid(np.repeat([1.0, 2.0], 50), 10).size == 2
    with pytest.raises(ValueError):
        threshold_grid(r, 0)


def _simple_fit(n=20_000, M=20, seed=4):
    g = np.random.default_rng(seed)
    x = (g.random(n) < 0.5).astype(float)[:, None]
    r = g.standard_normal(n) + 2 * x[:, 0]
    return fit_dr_continuous(r, x, M), r, x


def test_interpolation_anchor_points():
    m, r, x = _simple_fit()
    q = m.threshold_probs(x[:3])
    t = m.thresholds
    assert np.allclose(m.cdf(np.full(3, t[4]), x[:3]), q[:, 4])
    mid = 0.5 * (t[4] + t[5])
    assert np.allclose(m.cdf(np.full(3, mid), x[:3]), 0.5 * (q[:, 4] + q[:, 5]))


def test_tails_extrapolate_toward_zero_and_one():
    m, r, x = _simple_fit()
    width = m.thresholds[-1] - m.thresholds[0]
    lo = m.cdf(np.full(2, m.thresholds[0] - 10 * width), np.array([[0.0], [1.0]]))
    hi = m.cdf(np.full(2, m.thresholds[-1] + 10 * width), np.array([[0.0], [1.0]]))
    assert np.all(lo < 1e-6) and np.all(lo >= 0)
    assert np.all(hi > 1 - 1e-6) and np.all(hi <= 1)
    near = m.cdf(np.full(2, m.thresholds[0] - 0.1), np.array([[0.0], [1.0]]))
    q0 = m.threshold_probs(np.array([[0.0], [1.0]]))[:, 0]
    assert np.all(near > 0) and np.all(near < q0)


def test_matches_true_normal_cdf():
    m, r, x = _simple_fit(M=40)
    grid = np.linspace(-2, 4, 25)
    for v in (0.0, 1.0):
        F = m.cdf(grid, np.array([[v]]))
        true = special.ndtr(grid - 2 * v)
        assert np.max(np.abs(F - true)) <= 0.02


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 12))
def test_monotone_in_y(seed, M):
    g = np.random.default_rng(seed)
    n = 600
    x = g.standard_normal((n, 2))
    r = x @ [1.0, -0.5] + g.standard_normal(n) * np.exp(0.5 * x[:, 0])
    m = fit_dr_continuous(r, x, M) if n >= 10 * M else None
    if m is None:
        return
    grid = np.sort(g.normal(0, 4, 200))
    for row in x[:5]:
        F = m.cdf(grid, row[None, :])
        assert np.all(np.diff(F) >= 0)
        assert np.all((F >= 0) & (F <= 1))


def test_independent_outcome_gives_flat_slopes():
    g = np.random.default_rng(5)
    x = g.standard_normal((100_000, 1))
    r = g.standard_normal(100_000)
    m = fit_dr_continuous(r, x, 9)
    # Interior thresholds: the slope SE there is about 0.007.  The 1% and 99%
    # thresholds carry only ~1000 events each (SE about 0.03), so they get 4 SE.
    assert max(abs(f.coef[1]) for f in m.fits[1:-1]) <= 0.05
    assert max(abs(f.coef[1]) for f in m.fits) <= 4 * 0.032


def test_roundtrip_and_warm_start():
    m, r, x = _simple_fit(n=2000, M=10)
    back = DrContinuousModel.loads(m.dumps())
    y = np.linspace(-3, 5, 9)
    assert back.cdf(y, x[:1]).tobytes() == m.cdf(y, x[:1]).tobytes()
    warm = fit_dr_continuous(r, x, 10, init=m)
    assert np.allclose(warm.cdf(y, x[:1]), m.cdf(y, x[:1]), atol=1e-7)


def test_small_sample_warns():
    g = np.random.default_rng(6)
    with pytest.warns(RuntimeWarning):
        fit_dr_continuous(g.standard_normal(100), g.standard_normal((100, 1)), 20)


def test_discrete_two_categories_and_monotone():
    g = np.random.default_rng(7)
    x = g.standard_normal((3000, 1))
    k = (x[:, 0] + g.standard_normal(3000) > 0).astype(int)
    m = fit_dr_discrete(k, x, 2)
    xs = m.standardizer(x[:4])
    assert np.allclose(m.cdf(np.zeros(4), x[:4]), special.expit(m.fits[0].coef[0] + xs @ m.fits[0].coef[1:]))
    assert np.all(m.cdf(np.ones(4), x[:4]) == 1.0)
    k5 = np.clip(np.round(x[:, 0] * 1.5 + 2 + g.standard_normal(3000)), 0, 4).astype(int)
    m5 = fit_dr_discrete(k5, x, 5)
    F = m5.cdf_vector(g.standard_normal((1000, 1)) * 3)
    assert np.all(np.diff(F, axis=1) >= 0)
    assert np.allclose(m5.cdf_left(np.array([0, 3]), x[:2]), [0.0, m5.cdf_vector(x[1:2])[0, 2]])
    back = DrDiscreteModel.loads(m5.dumps())
    assert np.array_equal(back.cdf_vector(x[:3]), m5.cdf_vector(x[:3]))
