import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crrr import nn
from crrr.data import Standardizer
from crrr.dctm import (DctmModel, Normalizer, bernstein_basis, bernstein_basis_derivative,
                       fit_dctm)
from crrr.numeric import RngStream, softplus_inverse


def model_with_beta(beta, normalizer=Normalizer(0.0, 1.0), p=1):
    """A constant-in-x DCTM whose coefficients are exactly ``beta``."""
    beta = np.asarray(beta, dtype=float)
    J = beta.size - 1
    net = nn.Mlp([p, 4, J + 1])
    net.biases[-1][0] = beta[0]
    net.biases[-1][1:] = softplus_inverse(np.diff(beta))
    return DctmModel(net, normalizer, J, Standardizer(np.zeros(p), np.ones(p)))


def random_model(seed, J=6, p=2):
    net = nn.Mlp([p, 5, J + 1], "tanh").init(RngStream(seed), out_scale=1.0)
    return DctmModel(net, Normalizer(0.3, 1.7), J, Standardizer(np.zeros(p), np.ones(p)))


def test_bernstein_examples():
    assert np.allclose(bernstein_basis(0.5, 1), [0.5, 0.5], atol=0)
    b0 = bernstein_basis(0.0, 7)
    assert b0[0] == 1.0 and np.all(b0[1:] == 0)
    assert abs(bernstein_basis(0.3, 5).sum() - 1) < 1e-12
    u = np.linspace(0, 1, 11)
    assert np.allclose(bernstein_basis_derivative(u, 1), np.tile([-1.0, 1.0], (11, 1)))
    with pytest.raises(ValueError):
        bernstein_basis(1.2, 3)
    with pytest.raises(ValueError):
        bernstein_basis(0.5, 0)


@given(st.floats(0.001, 0.999), st.integers(1, 40))
def test_bernstein_partition_and_derivative(u, J):
    b = bernstein_basis(u, J)
    assert abs(b.sum() - 1) < 1e-12
    d = bernstein_basis_derivative(u, J)
    assert abs(d.sum()) < 1e-9 * J
    h = 1e-6
    fd = (bernstein_basis(u + h, J) - bernstein_basis(u - h, J)) / (2 * h)
    assert np.max(np.abs(fd - d)) <= 1e-6 * max(1.0, np.max(np.abs(d)))


def test_transform_limits_and_flat_increments():
    beta = np.array([-1.5, -0.2, 0.4, 2.5])
    m = model_with_beta(beta)
    x = np.zeros((1, 1))
    assert m.transform(1e6, x)[0] == pytest.approx(beta[-1])
    assert m.transform(-1e6, x)[0] == pytest.approx(beta[0])
    flat = model_with_beta([0.7] * 5)
    flat.net.biases[-1][1:] = -50.0
    t = flat.transform(np.linspace(-3, 3, 7), np.zeros((7, 1)))
    assert np.allclose(t, 0.7, atol=1e-18 * 0 + 1e-20) or np.max(np.abs(t - 0.7)) < 1e-20
    assert np.all(flat.transform_dy(np.linspace(-3, 3, 7), np.zeros((7, 1))) < 1e-20)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_transform_monotone_random_models(seed):
    m = random_model(seed)
    g = np.random.default_rng(seed)
    x = g.standard_normal((1000, 2)) * 2
    y1 = g.standard_normal(1000) * 5
    y2 = y1 + g.exponential(2.0, 1000)
    assert np.all(m.transform(y1, x) <= m.transform(y2, x))
    assert np.all(m.transform_dy(y1, x) >= 0)


def test_transform_dy_matches_finite_differences_and_expansion():
    m = random_model(4)
    g = np.random.default_rng(4)
    x = g.standard_normal((50, 2))
    y = g.standard_normal(50) * 2
    h = 1e-6
    fd = (m.transform(y + h, x) - m.transform(y - h, x)) / (2 * h)
    d = m.transform_dy(y, x)
    assert np.max(np.abs(fd - d) / np.maximum(np.abs(d), 1e-8)) <= 1e-5
    beta = m.beta(x)
    u = m.normalizer.u(y)
    J = m.J
    low = np.array([[math.comb(J - 1, k) * ui ** k * (1 - ui) ** (J - 1 - k) for k in range(J)]
                    for ui in u])
    expansion = J * np.sum(np.diff(beta, axis=1) * low, axis=1) * u * (1 - u) / m.normalizer.s
    assert np.max(np.abs(expansion - d)) <= 1e-10


def test_saturated_tail_has_zero_slope():
    m = random_model(2)
    assert m.transform_dy(np.array([1e5]), np.zeros((1, 2)))[0] == 0.0


def test_cdf_at_zero_transform_and_monotone_grid():
    m = model_with_beta([-2.0, -1.0, 1.0, 2.0])
    # T = 0 at u = 1/2 by symmetry, i.e. y = m
    assert m.cdf(np.array([0.0]), np.zeros((1, 1)))[0] == pytest.approx(0.5)
    r = random_model(8)
    x = np.random.default_rng(0).standard_normal((20, 2))
    grid = np.linspace(-10, 10, 100)
    for row in x:
        F = r.cdf(grid, row[None, :])
        assert np.all(np.diff(F) >= 0)


def test_nll_matches_linear_transform_closed_form():
    # beta_j = a + b j / J reproduces T(u) = a + b u exactly
    a, b, J = -2.0, 4.0, 9
    nz = Normalizer(0.5, 1.3)
    m = model_with_beta(a + b * np.arange(J + 1) / J, nz)
    y = np.random.default_rng(1).standard_normal(300)
    u = 1 / (1 + np.exp(-(y - 0.5) / 1.3))
    T = a + b * u
    ref = -stats.norm.logpdf(T) - np.log(b * u * (1 - u) / 1.3)
    got = m.nll(y, np.zeros((y.size, 1)))
    assert np.max(np.abs(got - ref)) <= 1e-10


def test_nll_change_of_variables():
    beta = np.array([-2.0, -0.5, 0.3, 1.9])
    y = np.random.default_rng(2).standard_normal(100)
    x = np.zeros((100, 1))
    m1 = model_with_beta(beta, Normalizer(0.0, 1.0))
    m2 = model_with_beta(beta, Normalizer(0.0, 2.0))
    # Doubling s with the data rescaled by 2 leaves u fixed: NLL moves by log 2.
    assert np.allclose(m2.nll(2 * y, x) - m1.nll(y, x), math.log(2), atol=1e-12)


def test_fit_on_x_independent_data_tracks_marginal():
    g = np.random.default_rng(3)
    n = 3000
    y = g.gamma(3.0, 1.0, n)
    x = g.standard_normal((n, 1))
    m = fit_dctm(y, x, nn.TrainConfig(max_epochs=80), J=12, rng=RngStream(1))
    grid = np.quantile(y, np.linspace(0.02, 0.98, 40))
    ecdf = np.searchsorted(np.sort(y), grid, side="right") / n
    for xv in (-1.0, 0.0, 1.0):
        F = m.cdf(grid, np.array([[xv]]))
        assert np.max(np.abs(F - ecdf)) <= 0.03


def test_unit_weights_equal_no_weights_and_roundtrip():
    g = np.random.default_rng(4)
    y = g.standard_normal(600)
    x = g.standard_normal((600, 2))
    cfg = nn.TrainConfig(max_epochs=3)
    a = fit_dctm(y, x, cfg, J=5, rng=RngStream(2))
    b = fit_dctm(y, x, cfg, J=5, weights=np.ones(600), rng=RngStream(2))
    assert a.net.params.tobytes() == b.net.params.tobytes()
    c = DctmModel.loads(a.dumps())
    assert c.cdf(y[:10], x[:10]).tobytes() == a.cdf(y[:10], x[:10]).tobytes()
    with pytest.raises(ValueError):
        DctmModel.loads(a.dumps().replace('"dctm"', '"ddctm"'))


def test_small_sample_warns():
    g = np.random.default_rng(5)
    with pytest.warns(RuntimeWarning):
        fit_dctm(g.standard_normal(150), g.standard_normal((150, 1)),
                 nn.TrainConfig(max_epochs=1, batch_size=32), J=3)


def test_normalizer_rejects_bad_scale():
    with pytest.raises(ValueError):
        Normalizer(0.0, 0.0)
    nz = Normalizer.from_sample(np.arange(101.0))
    assert nz.m == 50.0 and nz.s == pytest.approx(50.0 / 1.349)
