import math

import numpy as np
import pytest

import merobust.simlab as simlab
from merobust.dataset import Dataset
from merobust.gmm import GmmError
from merobust.simlab import (
    DiscreteDesign, SimConfig, SimulationError, analytic_conditional_moments, build_system,
    comparison_gest, comparison_standard_or, cubic_instruments, generate, generate_with_latent,
    intercept_shift, regime_bases, run_monte_carlo, true_theta,
)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(tau=0.0)
    with pytest.raises(ValueError):
        SimConfig(tau=1.2)
    with pytest.raises(ValueError):
        SimConfig(n_reps=0)
    with pytest.raises(ValueError):
        SimConfig(regime="neither")
    with pytest.raises(ValueError):
        SimConfig(tests=("magic",))
    assert SimConfig(tau=0.5).error_variance == 9.0


def test_no_error_when_tau_is_one():
    d, lat = generate_with_latent(SimConfig(n=100, tau=1.0), 0)
    np.testing.assert_array_equal(d.x[:, 0], lat.x_star)


def test_null_outcome_is_baseline():
    d, lat = generate_with_latent(SimConfig(n=100, psi0=0.0), 0)
    np.testing.assert_array_equal(d.y, lat.y0)
    d2, lat2 = generate_with_latent(SimConfig(n=100, psi0=0.3), 0)
    np.testing.assert_allclose(d2.y, lat2.y0 + 0.3 * d2.a)


def test_variances_match_design():
    d, lat = generate_with_latent(SimConfig(n=200_000, tau=0.5), 0)
    # Var(X*) = Var(Y0 + C + Y0 C) + 1 = 5 + 3 + 1
    assert np.var(lat.x_star) == pytest.approx(9.0, rel=0.03)
    assert np.var(d.x) / np.var(lat.x_star) == pytest.approx(2.0, rel=0.03)
    assert np.var(lat.error) == pytest.approx(9.0, rel=0.02)


def test_error_is_classical():
    d, lat = generate_with_latent(SimConfig(n=100_000, tau=0.7), 3)
    for other in (d.c[:, 0], d.y, lat.x_star):
        r = np.corrcoef(lat.error, other)[0, 1]
        assert abs(r) < 4 / math.sqrt(d.n)


def test_same_seed_same_data_and_distinct_replicates():
    cfg = SimConfig(n=50)
    np.testing.assert_array_equal(generate(cfg, 4).y, generate(cfg, 4).y)
    assert not np.array_equal(generate(cfg, 4).y, generate(cfg, 5).y)


def test_regime_wiring():
    c = np.array([1.0, 2.0, 3.0])
    e, o = regime_bases(c, "both_correct")
    np.testing.assert_array_equal(e[:, 1], c)
    np.testing.assert_array_equal(o[:, 1], c)
    e, o = regime_bases(c, "outcome_correct")
    np.testing.assert_array_equal(e[:, 1], c**2)
    np.testing.assert_array_equal(o[:, 1], c)
    e, o = regime_bases(c, "exposure_correct")
    np.testing.assert_array_equal(e[:, 1], c)
    np.testing.assert_array_equal(o[:, 1], c**2)


def test_instrument_wiring(null_data):
    q = cubic_instruments(null_data.c[:, 0])
    np.testing.assert_allclose(q.T @ q / null_data.n, np.eye(4), atol=1e-10)
    rps = build_system("rps", null_data)
    np.testing.assert_array_equal(rps.ell, q)
    assert not rps.m.any() and rps.q == 1
    ror = build_system("ror", null_data)
    np.testing.assert_array_equal(ror.k[:, 1], null_data.c[:, 0])
    assert ror.q == 1
    dr = build_system("dr", null_data)
    np.testing.assert_array_equal(dr.k, q[:, :2])
    np.testing.assert_array_equal(dr.m, q[:, :2])
    np.testing.assert_array_equal(dr.ell, q[:, 2:])
    assert dr.q == 1


def test_standard_or_on_zero_outcome():
    d = generate(SimConfig(n=100), 0)
    zero = Dataset(np.zeros(d.n), d.a, d.c, d.x)
    assert comparison_standard_or(zero) == 1.0


def test_comparison_pvalues_match_scipy_normal(null_data):
    from scipy import stats
    from merobust.gmm import ols_hc0
    design = np.column_stack([np.ones(null_data.n), null_data.c, null_data.x, null_data.y])
    coef, se = ols_hc0(design, null_data.a)
    assert comparison_gest(null_data) == pytest.approx(2 * stats.norm.sf(abs(coef[-1] / se[-1])))
    with pytest.raises(ValueError):
        comparison_gest(generate(SimConfig(n=10), 0).take(np.arange(4)))


def test_single_replicate_report():
    cfg = SimConfig(n=300, n_reps=1, tests=("rps", "gest"))
    rep = run_monte_carlo(cfg)
    assert [r.test for r in rep.rows] == ["rps", "gest"]
    for row in rep.rows:
        assert row.n_effective == 1 and row.rejections in (0, 1)
        assert row.rejection_rate * row.n_effective == row.rejections


def test_report_se_and_formats():
    rep = run_monte_carlo(SimConfig(n=300, n_reps=12, tests=("rps", "standard_or")))
    for row in rep.rows:
        r = row.rejection_rate
        assert row.monte_carlo_se == pytest.approx(math.sqrt(r * (1 - r) / row.n_effective))
    lines = rep.to_csv().splitlines()
    assert lines[0].startswith("regime,tau,test,psi0")
    assert len(lines) == 3
    assert '"rows"' in rep.to_json()


def test_deterministic_across_threads():
    cfg = SimConfig(n=300, n_reps=6, tests=("rps", "ror"))
    one = run_monte_carlo(cfg, threads=1)
    two = run_monte_carlo(cfg, threads=2)
    assert one.to_csv() == two.to_csv()
    for key in one.p_values:
        np.testing.assert_array_equal(one.p_values[key], two.p_values[key])


def test_failures_are_excluded_then_abort(monkeypatch):
    real = simlab.run_test
    calls = {"n": 0}

    def flaky(test, dataset, regime="both_correct", weighting="iterated"):
        calls["n"] += 1
        if calls["n"] == 1:
            raise GmmError("synthetic failure")
        return real(test, dataset, regime, weighting)

    monkeypatch.setattr(simlab, "run_test", flaky)
    rep = run_monte_carlo(SimConfig(n=200, n_reps=120, tests=("gest",)))
    assert rep.rows[0].n_effective == 119
    assert len(rep.failures[("both_correct", 1.0, "gest", 0.0)]) == 1

    calls["n"] = 0
    monkeypatch.setattr(simlab, "run_test", lambda *a, **k: (_ for _ in ()).throw(GmmError("x")))
    with pytest.raises(SimulationError):
        run_monte_carlo(SimConfig(n=200, n_reps=20, tests=("gest",)))


def test_analytic_moments_against_large_sample():
    tau = 0.7
    d, lat = generate_with_latent(SimConfig(n=400_000, tau=tau), 9)
    c = d.c[:, 0]
    delta = d.a - c - d.x[:, 0]
    h = d.y
    cm = analytic_conditional_moments(c, tau)
    # compare population regressions on (1, C, C^2) of each product with its analytic value
    basis = np.column_stack([np.ones_like(c), c, c**2])
    fit = lambda v: basis @ np.linalg.lstsq(basis, v, rcond=None)[0]
    inner = np.abs(c) < 2
    for target, exact, tol in [
        (delta**2, cm.e_d2, 0.05), (delta**2 * h, cm.e_d2h, 0.1), (delta * d.a, cm.e_da, 0.05),
        (h, cm.e_h, 0.01), (d.x[:, 0], cm.e_x[:, 0], 0.05),
    ]:
        np.testing.assert_allclose(fit(target)[inner], exact[inner], atol=tol * (1 + np.abs(exact).max()))


def test_intercept_shift_signs():
    assert intercept_shift("rps_binary", 0.1, 2.0, 0.5) == pytest.approx(1.1)
    assert intercept_shift("dr_count", 0.1, 2.0, 0.5) == pytest.approx(1.1)
    assert intercept_shift("rps_count", 0.1, 2.0, 0.5) == pytest.approx(-0.9)
    with pytest.raises(ValueError):
        intercept_shift("rps", 0.0, 1.0, 1.0)


@pytest.mark.parametrize("kind", ["rps_binary", "rps_count", "ror_count", "dr_count"])
def test_discrete_pseudo_truth_lengths(kind):
    design = DiscreteDesign("binary" if kind == "rps_binary" else "count")
    assert len(design.pseudo_true(kind)) == {"rps_binary": 3, "rps_count": 3, "ror_count": 3,
                                              "dr_count": 5}[kind]
    d = design.draw(50, np.random.default_rng(0))
    assert d.exposure_kind == design.exposure


def test_true_theta_layout():
    np.testing.assert_array_equal(true_theta("dr"), [0.0, 1.0, 1.0, 0.0, 0.5])
