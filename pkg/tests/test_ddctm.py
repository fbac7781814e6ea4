import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crrr import nn
from crrr.data import Standardizer
from crrr.ddctm import DdctmAdapter, DdctmModel, fit_ddctm, inverse_frequency_weights
from crrr.numeric import RngStream


def random_model(seed, K=5, p=2):
    net = nn.Mlp([p, 6, K], "tanh").init(RngStream(seed), out_scale=3.0)
    return DdctmModel(net, K, Standardizer(np.zeros(p), np.ones(p)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 9))
def test_cdf_vector_monotone_and_pmf_sums(seed, K):
    m = random_model(seed, K)
    x = np.random.default_rng(seed).standard_normal((1000, 2)) * 3
    F = m.cdf_vector(x)
    assert np.all(np.diff(F, axis=1) >= 0)
    assert np.all(F[:, -1] == 1.0)
    P = m.pmf_vector(x)
    assert np.all(P >= 0)
    assert np.max(np.abs(P.sum(axis=1) - 1)) <= 1e-12
    # differences of the cdf reproduce the pmf
    assert np.allclose(np.diff(np.c_[np.zeros(1000), F], axis=1), P, atol=1e-12)


def test_flat_increments_and_two_categories():
    m = random_model(0, K=4)
    m.net.weights[-1][:] = 0.0
    m.net.biases[-1][:] = [0.4, -60.0, -60.0, -60.0]
    F = m.cdf_vector(np.zeros((1, 2)))[0]
    assert np.allclose(F[:-1], 1 / (1 + np.exp(-0.4)), atol=1e-20 + 1e-12)
    m2 = random_model(1, K=2)
    x = np.random.default_rng(1).standard_normal((5, 2))
    P = m2.pmf_vector(x)
    F2 = m2.cdf_vector(x)
    assert np.allclose(P[:, 0], F2[:, 0]) and np.allclose(P[:, 1], 1 - F2[:, 0])


def test_loss_examples():
    K = 8
    ad = DdctmAdapter(np.arange(K), K)
    net = nn.Mlp([1, K])
    # uniform probabilities: cumulative logits at log(j / (K - j))
    F = np.arange(1, K) / K
    s = np.log(F / (1 - F))
    c = s[0] - 1.0
    inc = np.diff(np.r_[c, s])
    net.biases[0][:] = np.r_[c, inc + np.log(-np.expm1(-inc))]
    loss, _ = ad.loss_and_grad(net.forward(np.zeros((K, 1))), np.arange(K))
    assert np.allclose(loss, math.log(8), atol=1e-12)
    # near one-hot prediction
    net.biases[0][:] = np.r_[40.0, np.full(K - 1, 5.0)]
    loss, _ = ad.loss_and_grad(net.forward(np.zeros((1, 1))), np.array([0]))
    assert loss[0] < 1e-15


def test_extreme_scores_stay_finite():
    ad = DdctmAdapter(np.array([0, 1, 2]), 3)
    out = np.array([[800.0, 3.0, 3.0], [-800.0, 0.0, 0.0], [0.0, -800.0, 900.0]])
    loss, g = ad.loss_and_grad(out, np.arange(3))
    assert np.all(np.isfinite(loss)) and np.all(np.isfinite(g))


def test_fit_matches_group_frequencies():
    g = np.random.default_rng(2)
    n = 10_000
    x = (g.random(n) < 0.5).astype(float)[:, None]
    p0 = np.array([0.1, 0.2, 0.3, 0.4])
    p1 = np.array([0.4, 0.3, 0.2, 0.1])
    k = np.where(x[:, 0] == 0, g.choice(4, n, p=p0), g.choice(4, n, p=p1))
    m = fit_ddctm(k, x, nn.TrainConfig(max_epochs=60), K=4, rng=RngStream(3))
    for v in (0.0, 1.0):
        sel = x[:, 0] == v
        emp = np.cumsum(np.bincount(k[sel], minlength=4) / sel.sum())
        assert np.max(np.abs(m.cdf_vector(np.array([[v]]))[0] - emp)) <= 0.02


def test_x_independent_fit_tracks_frequencies():
    g = np.random.default_rng(5)
    n = 10_000
    k = g.choice(5, n, p=[0.05, 0.15, 0.3, 0.3, 0.2])
    x = g.standard_normal((n, 2))
    m = fit_ddctm(k, x, nn.TrainConfig(max_epochs=30), K=5, rng=RngStream(1))
    emp = np.cumsum(np.bincount(k, minlength=5) / n)
    F = m.cdf_vector(x[:50])
    assert np.max(np.abs(F - emp)) <= 0.02


def test_cdf_and_left_limit_lookup():
    m = random_model(4, K=4)
    x = np.zeros((1, 2))
    F = m.cdf_vector(x)[0]
    ks = np.array([0, 1, 2, 3])
    assert np.allclose(m.cdf(ks, x), F)
    assert np.allclose(m.cdf_left(ks, x), np.r_[0.0, F[:-1]])


def test_absent_category_warns_but_keeps_mass():
    g = np.random.default_rng(6)
    k = g.choice([0, 1, 3], 800)
    with pytest.warns(RuntimeWarning):
        m = fit_ddctm(k, g.standard_normal((800, 1)), nn.TrainConfig(max_epochs=2), K=4)
    assert np.all(m.pmf_vector(np.zeros((1, 1)))[0] > 0)


def test_label_validation():
    with pytest.raises(ValueError):
        fit_ddctm(np.array([0.5, 1.0] * 50), np.zeros((100, 1)), K=3)
    with pytest.raises(ValueError):
        fit_ddctm(np.array([0, 3] * 50), np.zeros((100, 1)), K=3)


def test_class_weights():
    k = np.array([0, 0, 0, 1, 1, 2])
    cw = inverse_frequency_weights(k, 3)
    assert cw[k].mean() == pytest.approx(1.0)
    assert cw[0] * 3 == pytest.approx(cw[2] * 1)


def test_roundtrip_and_unit_weights():
    g = np.random.default_rng(7)
    k = g.integers(0, 3, 600)
    x = g.standard_normal((600, 1))
    cfg = nn.TrainConfig(max_epochs=3)
    a = fit_ddctm(k, x, cfg, K=3, rng=RngStream(1))
    b = fit_ddctm(k, x, cfg, K=3, weights=np.ones(600), rng=RngStream(1))
    assert a.net.params.tobytes() == b.net.params.tobytes()
    c = DdctmModel.loads(a.dumps())
    assert c.cdf_vector(x[:5]).tobytes() == a.cdf_vector(x[:5]).tobytes()
