import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from crrr import nn, simlab
from crrr.engine import FitConfig, crossfit_ranks, rho_ols
from crrr.numeric import RngStream
from crrr.simlab import (DgpSpec, McResult, complex_components, discretize, generate,
                         oracle_ranks, pit_report, skew, skew_inverse, true_rho_simple,
                         true_rho_simple_discrete, truth)

TRUTH = 0.581923


def test_simple_truth():
    assert abs(true_rho_simple(0.6) - TRUTH) <= 1e-5
    assert true_rho_simple(0.0) == 0.0
    assert true_rho_simple(1.0) == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(ValueError):
        true_rho_simple(1.2)


def test_simple_normal_moments():
    d = simlab.gen_simple_normal(0.0, 100_000, RngStream(1))
    assert abs(d.y.mean() - 165) <= 0.1 and abs(d.w.mean() - 180) <= 0.1
    for g in (0, 1):
        m = d.x[:, 0] == g
        assert abs(np.corrcoef(d.y[m], d.w[m])[0, 1] - 0.6) <= 0.02
    d = simlab.gen_simple_normal(12.0, 100_000, RngStream(2))
    assert abs(d.w[d.x[:, 0] == 1].mean() - 168) <= 0.1


def test_complex_components_at_origin():
    m_y, s_y, m_w, s_w = complex_components(np.zeros((1, 8)))
    assert (m_y[0], m_w[0]) == (0.0, 4.0)
    assert s_y[0] == pytest.approx(np.exp(0.5)) and s_w[0] == pytest.approx(np.exp(0.3))


def test_skew_monotone_and_invertible():
    g = np.random.default_rng(0)
    z = np.sort(g.normal(0, 3, (1000, 2)), axis=1)
    z = z[z[:, 0] < z[:, 1]]
    assert np.all(skew(z[:, 0], 0.8, 1.2) < skew(z[:, 1], 0.8, 1.2))
    t = g.normal(0, 5, 1000)
    assert np.allclose(skew(skew_inverse(t, 0.8, 1.2), 0.8, 1.2), t, atol=1e-10)


def test_complex_oracle_spearman():
    spec = DgpSpec("complex-continuous")
    d = generate(spec, 500_000, RngStream(3))
    fy, _, fw, _ = oracle_ranks(spec, d)
    assert abs(rho_ols((fy, fw)) - TRUTH) <= 0.01
    # the oracle ranks really are uniform
    assert stats.kstest(fy, "uniform").pvalue > 1e-3


def test_discretize_right_closed():
    c = [0.0, 1.0]
    assert discretize([-1.0, 0.0, 0.5, 1.0, 2.0], c).tolist() == [0, 0, 1, 1, 2]
    with pytest.raises(ValueError):
        discretize([0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        DgpSpec("simple-discrete", cutoffs_y=(1.0, 0.5))
    with pytest.raises(ValueError):
        DgpSpec("uniform")


def test_simple_cutoffs_are_baseline_octiles():
    cy, cw = simlab.simple_discrete_cutoffs()
    assert np.allclose(stats.norm.cdf((cy - 165) / 4), np.arange(1, 8) / 8)
    assert np.allclose(cw - cy, 15.0)
    d = generate(DgpSpec("simple-discrete"), 200_000, RngStream(4))
    assert np.allclose(np.bincount(d.y.astype(int), minlength=8) / d.n, 1 / 8, atol=0.004)


SIMPLE_CASES = [(0.0, 0.0), (12.0, 0.0), (12.0, 0.5), (12.0, 1.0)]


@pytest.mark.parametrize("delta,omega", SIMPLE_CASES)
def test_simple_discrete_closed_form_matches_oracle_sample(delta, omega):
    spec = DgpSpec("simple-discrete", delta=delta).resolved()
    d = generate(spec, 2_000_000, RngStream(5))
    Fy, Fyl, Fw, Fwl = oracle_ranks(spec, d)
    u = omega * Fy + (1 - omega) * Fyl
    v = omega * Fw + (1 - omega) * Fwl
    assert abs(rho_ols((u, v)) - true_rho_simple_discrete(delta, omega)) <= 0.002


def test_simple_discrete_frozen_values():
    got = [true_rho_simple_discrete(dl, om) for dl, om in SIMPLE_CASES]
    assert np.allclose(got, [0.56745, 0.29428, 0.57864, 0.28458], atol=5e-6)


def test_cutoff_mapping_is_detectable():
    # Using the lower cut point as the right limit (an off-by-one category
    # mapping) moves the simple-discrete truth by well over 0.005.
    cy, cw = simlab.simple_discrete_cutoffs()
    good = true_rho_simple_discrete(12.0, 1.0)
    shifted = true_rho_simple_discrete(12.0, 1.0, (cy, np.r_[cw[1:], cw[-1] + 4]))
    assert abs(good - shifted) > 0.005


def test_complex_discrete_fixture_and_truths():
    cy, cw = simlab.complex_discrete_cutoffs()
    assert np.all(np.diff(cy) > 0) and np.all(np.diff(cw) > 0)
    frozen = {om: truth(DgpSpec("complex-discrete"), om) for om in (0.0, 0.5, 1.0)}
    fresh = simlab.true_rho_complex_discrete([0.0, 0.5, 1.0], oracle_n=1_000_000, seed=99)
    for om in frozen:
        assert abs(fresh[om] - frozen[om]) <= 0.005
    assert abs(frozen[0.5] - 0.35002) <= 0.005


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40), st.floats(-1, 1))
def test_mc_result_identity(est, t):
    r = McResult(np.asarray(est), t)
    bias = r.mean - t
    assert abs(r.rmse ** 2 - (bias ** 2 + r.sd ** 2 * (r.reps - 1) / r.reps)) <= 1e-10


def test_mc_result_constant():
    r = McResult(np.full(5, 0.3), 0.3)
    assert r.sd == 0 and r.mad == 0 and r.rmse == 0


def test_mc_run_needs_two_reps():
    with pytest.raises(ValueError):
        simlab.mc_run(DgpSpec(), "dr", reps=1, n=100)


def test_pit_report_grid_and_degenerate():
    n = 1000
    grid = (np.arange(1, n + 1) - 0.5) / n
    row = pit_report({"grid": grid})[0]
    assert row["mean"] == pytest.approx(0.5)
    assert row["var"] == pytest.approx((1 - 1 / n ** 2) / 12)
    assert row["ks_p"] > 0.99
    bad = pit_report({"const": np.full(n, 0.5)})[0]
    assert bad["ks_p"] < 1e-6 and bad["chi2_p"] < 1e-6
    with pytest.raises(ValueError):
        pit_report({"empty": []})


FAST = FitConfig(train=nn.TrainConfig(max_epochs=2), J=6, M=10)


def test_omega_sweep_flat_on_continuous():
    d = generate(DgpSpec(), 600, RngStream(6))
    cf = crossfit_ranks(d, "dr", seed=0, cfg=FAST)
    rows = simlab.omega_sweep(cf, np.linspace(0, 1, 11))
    assert len(rows) == 11
    assert len({r["rho_c"] for r in rows}) == 1
    with pytest.raises(ValueError):
        simlab.omega_sweep(cf, [1.5])


def test_heterogeneity_index_is_not_used_by_estimation(monkeypatch):
    def trap(*a, **k):
        raise AssertionError("plotting index reached estimation")

    monkeypatch.setattr(simlab, "heterogeneity_index", trap)
    d = generate(DgpSpec("complex-continuous"), 600, RngStream(7))
    for fam in ("dctm", "dr"):
        crossfit_ranks(d, fam, seed=0, cfg=FAST)
