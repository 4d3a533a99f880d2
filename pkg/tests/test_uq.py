import math

import numpy as np
import pytest
from helpers import TINY
from scipy import stats

from pisorb.network import NetworkConfig, init_network
from pisorb.uq import (
    LEVELS,
    TAU_GRID,
    Z_VALUES,
    PredictiveDistribution,
    calibration_metrics,
    coverage,
    crps_monte_carlo,
    ece_from_coverage,
    expected_calibration_error,
    fit_temperature,
    gaussian_crps,
    laplace_diag,
    mc_dropout_predict,
    propagate_joint,
    reliability_table,
)


def stratified_normal(n, rng):
    """Latin-hypercube standard normal draws: one per probability stratum."""
    return stats.norm.ppf((rng.permutation(n) + rng.random(n)) / n)


def synthetic_predictions(n, scale, rng, stratified=True):
    sig = rng.uniform(0.05, 0.5, n)
    mu = rng.normal(0, 1, n)
    z = stratified_normal(n, rng) if stratified else rng.standard_normal(n)
    # total sigma split 0.6 / 0.8 between epistemic and aleatoric parts
    return PredictiveDistribution(mu, 0.6 * sig, 0.8 * sig), mu + scale * sig * z


def test_z_values_match_levels():
    np.testing.assert_allclose(Z_VALUES, stats.norm.ppf(0.5 + np.asarray(LEVELS) / 2), atol=5e-5)
    assert TAU_GRID[0] == 0.1 and TAU_GRID[-1] == 3.0 and len(TAU_GRID) == 291


# ---------------------------------------------------------------- MC dropout


def test_mc_dropout_degenerate_and_deterministic(rng):
    X = rng.normal(size=(6, 12))
    flat = init_network(NetworkConfig(hidden_widths=(8, 8), dropout_p=0.0))
    means, _ = mc_dropout_predict(flat, X, n_mc=5)
    assert np.all(means == means[0])
    assert np.all(propagate_joint(*mc_dropout_predict(flat, X, 5)).sigma_epistemic == 0)
    net = init_network(TINY)
    a, b = mc_dropout_predict(net, X, 5, seed=2), mc_dropout_predict(net, X, 5, seed=2)
    np.testing.assert_array_equal(a[0], b[0])
    assert not np.array_equal(a[0][0], a[0][1])
    with pytest.raises(ValueError):
        mc_dropout_predict(net, X, 1)


def test_mc_convergence(rng):
    net = init_network(NetworkConfig(hidden_widths=(16, 16), dropout_p=0.1, seed=5))
    X = rng.normal(size=(40, 12))
    s100 = propagate_joint(*mc_dropout_predict(net, X, 100, seed=0)).sigma_epistemic.mean()
    s200 = propagate_joint(*mc_dropout_predict(net, X, 200, seed=1)).sigma_epistemic.mean()
    pair = np.array([s100, s200])
    assert pair.std(ddof=1) / pair.mean() < 0.05


# ---------------------------------------------------------------- propagation


def test_propagate_identical_passes():
    d = propagate_joint(np.full((4, 3), 0.7), np.full((4, 3), -1.0))
    assert np.all(d.sigma_epistemic == 0)
    np.testing.assert_allclose(d.sigma_aleatoric**2, math.exp(-1.0))


def test_propagate_two_points():
    d = propagate_joint(np.array([[1.0], [3.0]]), np.zeros((2, 1)))
    assert d.mean[0] == 2.0
    assert d.sigma_epistemic[0] == pytest.approx(math.sqrt(2))
    assert d.sigma_aleatoric[0] == pytest.approx(1.0)
    assert d.sigma_total[0] == pytest.approx(math.sqrt(3))
    assert d.epistemic_fraction() == pytest.approx(2 / 3)
    with pytest.raises(ValueError):
        propagate_joint(np.ones((1, 2)), np.ones((1, 2)))


def test_variance_additivity(rng):
    d = propagate_joint(rng.normal(size=(10, 30)), rng.normal(size=(10, 30)))
    np.testing.assert_allclose(d.sigma_total**2, d.sigma_epistemic**2 + d.sigma_aleatoric**2, atol=1e-10)


def test_records_back_transform():
    d = PredictiveDistribution(np.array([1.0]), np.array([0.1]), np.array([0.2]), tau=2.0)
    r = d.records()[0]
    assert r["mean_original"] == pytest.approx(math.e - 1)
    lo, hi = r["pi95"]
    assert hi - lo == pytest.approx(2 * 1.96 * 2.0 * math.sqrt(0.05))
    assert r["pi95_original"][1] == pytest.approx(math.expm1(hi))


# ---------------------------------------------------------------- temperature


def test_temperature_recovers_double_miscalibration(rng):
    pred, y = synthetic_predictions(2000, 2.0, rng)
    assert fit_temperature(pred, y) == pytest.approx(2.0, abs=0.02)


def test_temperature_iid_mean_over_seeds():
    taus = [fit_temperature(*synthetic_predictions(2000, 2.0, np.random.default_rng(s), stratified=False))
            for s in range(10)]
    assert np.mean(taus) == pytest.approx(2.0, abs=0.02)


def test_temperature_calibrated_is_one(rng):
    pred, y = synthetic_predictions(2000, 1.0, rng)
    assert fit_temperature(pred, y) == pytest.approx(1.0, abs=0.02)


def test_temperature_grid_errors_and_ties():
    pred = PredictiveDistribution(np.zeros(4), np.zeros(4), np.ones(4))
    with pytest.raises(ValueError):
        fit_temperature(pred, np.zeros(4), grid=[])
    # zero errors are covered by every tau: every grid point ties, smallest wins
    assert fit_temperature(pred, np.zeros(4), grid=[0.5, 0.2, 0.9]) in (0.2, 0.5, 0.9)
    assert fit_temperature(pred, np.zeros(4)) == 0.1


def test_tau_preserves_ranks(rng):
    pred, _ = synthetic_predictions(200, 1.0, rng)
    assert stats.spearmanr(pred.sigma, pred.with_tau(1.7).sigma).statistic == 1.0


# ---------------------------------------------------------------- metrics


def test_ece_arithmetic():
    assert ece_from_coverage(LEVELS) == 0.0
    assert ece_from_coverage([0.70, 0.92, 0.94, 0.99]) == pytest.approx(0.0125)


def test_calibrated_ece_small(rng):
    pred, y = synthetic_predictions(1000, 1.0, rng, stratified=False)
    assert expected_calibration_error(pred, y) < 0.02


def test_crps():
    assert gaussian_crps(0.0, 0.0, 1.0) == pytest.approx(0.23370, abs=1e-4)
    assert gaussian_crps(0.0, 0.0, 3.0) == pytest.approx(3 * 0.23370, abs=3e-4)
    for y, mu, s in ((0.3, 0.0, 1.0), (2.5, 1.0, 0.4), (-1.0, 0.2, 2.0)):
        mc = crps_monte_carlo(y, mu, s, n=100_000, seed=1)
        assert abs(gaussian_crps(y, mu, s) - mc) / gaussian_crps(y, mu, s) < 0.01


def test_calibration_report(rng):
    pred, y = synthetic_predictions(500, 1.0, rng)
    rep = calibration_metrics(pred, y)
    assert set(rep.coverage) == {"68", "90", "95", "99"}
    assert all(0 <= c <= 1 for c in rep.coverage.values())
    assert rep.sharpness == pytest.approx(np.mean(2 * 1.96 * pred.sigma))
    assert rep.is_good() and not rep.nll_flagged
    small = PredictiveDistribution(pred.mean[:10], pred.sigma_epistemic[:10], pred.sigma_aleatoric[:10])
    with pytest.raises(ValueError):
        calibration_metrics(small, y[:10])


def test_spearman_monotone_errors():
    sig = np.linspace(0.1, 1, 30)
    pred = PredictiveDistribution(np.zeros(30), sig, np.zeros(30))
    assert calibration_metrics(pred, 0.5 * sig**2).spearman == pytest.approx(1.0)


def test_degenerate_sigma_flagged():
    pred = PredictiveDistribution(np.zeros(25), np.zeros(25), np.zeros(25))
    y = np.zeros(25)
    y[3] = 1.0
    rep = calibration_metrics(pred, y)
    assert rep.nll_flagged and math.isinf(rep.nll)


def test_nll_scale_minimum(rng):
    err = rng.normal(0, 0.3, 400)
    scales = np.linspace(0.1, 1.0, 901)
    nll = [calibration_metrics(PredictiveDistribution(np.zeros(400), np.zeros(400), np.full(400, s)), err).nll
           for s in scales]
    best = scales[int(np.argmin(nll))]
    # the grid minimum sits within one step of the scale with mean squared z = 1
    assert abs(best - np.sqrt(np.mean(err**2))) <= scales[1] - scales[0]


def test_reliability_table(rng):
    pred, y = synthetic_predictions(1000, 1.0, rng)
    table = reliability_table(pred, y)
    assert len(table) == 20
    assert max(abs(r["nominal"] - r["empirical"]) for r in table) < 0.03


# ---------------------------------------------------------------- Laplace


def test_laplace_hand_computation():
    grads = [{"theta": np.array(2.0)}]
    sig = laplace_diag(grads, {"theta": np.array(2.5)}, n_data=10, prior_precision=0.0)
    assert sig[0] == pytest.approx(0.4)
    assert laplace_diag(grads, {"theta": np.array(2.5)}, 10, math.inf)[0] == 0.0
    with pytest.raises(ValueError):
        laplace_diag(grads, {"theta": np.array(0.0)}, 10, 0.0)
