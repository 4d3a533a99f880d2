import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import least_squares

from pisorb import isotherm as I
from pisorb.isotherm import FitError, FitResult, IsothermParams

P_GRID = np.linspace(0.0, 50.0, 400)

params_strategy = st.one_of(
    st.builds(IsothermParams.langmuir, st.floats(0, 100), st.floats(0.01, 10)),
    st.builds(IsothermParams.freundlich, st.floats(1e-3, 1e3), st.floats(0.5, 10)),
    st.builds(IsothermParams.sips, st.floats(0, 100), st.floats(0.01, 10), st.floats(0.5, 10)),
)


def rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------- evaluation


def test_reference_parameter_values():
    assert I.eval_isotherm(IsothermParams.langmuir(22.30, 0.732), 2.0) == pytest.approx(13.25, abs=0.01)
    assert I.eval_isotherm(IsothermParams.sips(49.85, 0.060, 0.52), 2.0) == pytest.approx(12.43, abs=0.02)


@pytest.mark.parametrize("p", [IsothermParams.langmuir(20, 0.5), IsothermParams.freundlich(3, 2),
                               IsothermParams.sips(30, 0.8, 2.0)])
def test_zero_pressure(p):
    assert I.eval_isotherm(p, 0.0) == 0.0


def test_compositional_zero_pressure_and_clamp():
    p = I.IsothermParams("comp_langmuir", (20, 0.5, -1.0, 5.0))
    assert I.eval_isotherm(p, 0.0, (30.0, 6.0)) == 0.0
    # 1 - 1 - 5 < 0: clamped capacity gives zero uptake
    assert I.eval_isotherm(p, 3.0, (30.0, 6.0)) == 0.0


def test_compositional_scaling():
    base = IsothermParams.sips(25, 0.7, 1.3)
    comp = I.IsothermParams("comp_sips", (25, 0.7, 1.3, 0.6, 0.3))
    V, M = 15.0, 3.0
    factor = 1 + 0.6 * V / 30 - 0.3 * M / 6
    assert I.eval_isotherm(comp, 4.0, (V, M)) == pytest.approx(factor * I.eval_isotherm(base, 4.0))


def test_compositional_requires_composition():
    with pytest.raises(FitError):
        I.eval_isotherm(I.IsothermParams("comp_langmuir", (20, 0.5, 0, 0)), 1.0)


def test_negative_pressure_rejected():
    with pytest.raises(ValueError):
        I.eval_isotherm(IsothermParams.langmuir(20, 0.5), -1.0)


@given(st.floats(0, 100), st.floats(0.01, 10), st.floats(0, 1e4))
def test_sips_reduces_to_langmuir(q, K, P):
    a = I.eval_isotherm(IsothermParams.sips(q, K, 1.0), P)
    b = I.eval_isotherm(IsothermParams.langmuir(q, K), P)
    assert abs(a - b) <= 1e-12 * max(1.0, abs(b))


@given(params_strategy)
def test_monotone_in_pressure(p):
    q = I.eval_isotherm(p, P_GRID)
    assert np.all(np.diff(q) >= -1e-12 * max(1.0, float(np.max(q))))


@given(st.floats(1, 100), st.floats(0.01, 10), st.floats(0.5, 10))
def test_saturation(q, K, n):
    for p in (IsothermParams.langmuir(q, K), IsothermParams.sips(q, K, n)):
        assert np.all(I.eval_isotherm(p, np.array([0.1, 1.0, 10.0])) <= q)
    # far enough out that (K P)^n >= 1e4
    P_far = 1e4 ** (1 / n) / K
    assert I.eval_isotherm(IsothermParams.langmuir(q, K), 1e6) == pytest.approx(q, rel=1e-3)
    assert I.eval_isotherm(IsothermParams.sips(q, K, n), P_far) == pytest.approx(q, rel=1e-3)


def test_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    P = np.linspace(0.1, 9, 12)
    comp = (rng.uniform(5, 35, 12), rng.uniform(0, 8, 12))
    thetas = {"langmuir": [20, 0.5], "freundlich": [3, 2], "sips": [30, 0.8, 1.7],
              "comp_langmuir": [20, 0.5, 0.3, 0.2], "comp_sips": [25, 0.6, 1.4, -0.3, 0.4]}
    for name, th in thetas.items():
        m = I.MODELS[name]
        th = np.array(th, float)
        c = comp if m.compositional else None
        J = m.jac(th, P, c)
        num = np.empty_like(J)
        for k in range(len(th)):
            h = 1e-6 * max(1.0, abs(th[k]))
            e = np.zeros_like(th)
            e[k] = h
            num[:, k] = (m.f(th + e, P, c) - m.f(th - e, P, c)) / (2 * h)
        np.testing.assert_allclose(J, num, rtol=1e-6, atol=1e-8, err_msg=name)


# ---------------------------------------------------------------- solver


def test_huber_values():
    r = np.array([-3.0, -0.5, 0.0, 0.5, 2.0])
    np.testing.assert_allclose(I.huber(r), [2.5, 0.125, 0.0, 0.125, 1.5])
    np.testing.assert_allclose(I.huber_weights(r), [1 / 3, 1, 1, 1, 0.5])


def test_huber_is_half_ssq_for_small_residuals():
    P = np.linspace(0.2, 9, 20)
    q = I.eval_isotherm(IsothermParams.langmuir(20, 0.5), P) + 0.1 * np.sin(P)
    fit = I.fit_isotherm("langmuir", P, q)
    assert np.max(np.abs(fit.residuals)) < 1.0
    assert fit.loss == pytest.approx(0.5 * np.sum(fit.residuals**2), rel=1e-10)


def test_bounded_lm_respects_box():
    res = I.bounded_lm(lambda x: x - 5.0, lambda x: np.eye(2), [0.0, 0.0], [-1, -1], [1, 2])
    np.testing.assert_allclose(res.x, [1, 2])
    assert res.converged


# ---------------------------------------------------------------- fitting


def test_langmuir_recovery_noiseless():
    P = np.linspace(0.1, 9, 30)
    fit = I.fit_isotherm("langmuir", P, I.eval_isotherm(IsothermParams.langmuir(20, 0.5), P))
    assert rel(fit.params["q_max"], 20) < 0.01 and rel(fit.params["K"], 0.5) < 0.01
    assert fit.converged and fit.n_evaluations <= I.MAX_NFEV


def test_sips_recovery_noiseless():
    P = np.linspace(0.1, 9, 40)
    fit = I.fit_isotherm("sips", P, I.eval_isotherm(IsothermParams.sips(30, 0.8, 2.0), P))
    for k, v in (("q_max", 30), ("K", 0.8), ("n", 2.0)):
        assert rel(fit.params[k], v) < 0.02


def test_freundlich_recovery_noiseless():
    P = np.linspace(0.1, 9, 30)
    fit = I.fit_isotherm("freundlich", P, I.eval_isotherm(IsothermParams.freundlich(4.0, 2.5), P))
    assert rel(fit.params["K_F"], 4.0) < 0.01 and rel(fit.params["n"], 2.5) < 0.01


def test_compositional_recovery_noiseless():
    rng = np.random.default_rng(3)
    P = np.tile(np.linspace(0.2, 9, 8), 6)
    V = np.repeat(rng.uniform(8, 38, 6), 8)
    M = np.repeat(rng.uniform(0.5, 8, 6), 8)
    truth = I.IsothermParams("comp_sips", (24.0, 0.6, 1.2, -0.4, 0.3))
    q = I.eval_isotherm(truth, P, (V, M))
    fit = I.fit_isotherm("comp_sips", P, q, composition=(V, M))
    np.testing.assert_allclose(fit.params.values, truth.values, rtol=0.02, atol=1e-3)


def test_constant_data_does_not_crash():
    P = np.linspace(0.5, 9, 15)
    fit = I.fit_isotherm("langmuir", P, np.full(15, 7.0))
    assert fit.at_bound or not fit.converged
    assert np.isfinite(fit.rmse)


def test_fit_errors():
    with pytest.raises(FitError):
        I.fit_isotherm("sips", [1, 2, 3], [1, 2, 3])
    with pytest.raises(FitError):
        I.fit_isotherm("langmuir", [2, 2, 2, 2], [1, 2, 3, 4])
    with pytest.raises(FitError):
        I.fit_isotherm("comp_langmuir", np.arange(1, 8.0), np.arange(1, 8.0))


def test_fit_idempotence():
    rng = np.random.default_rng(7)
    P = np.linspace(0.2, 9, 35)
    q = I.eval_isotherm(IsothermParams.sips(28, 0.6, 1.4), P) * (1 + 0.03 * rng.standard_normal(35))
    fit = I.fit_isotherm("sips", P, q)
    again = I.fit_isotherm("sips", P, q, init=fit.params)
    np.testing.assert_allclose(again.params.values, fit.params.values, rtol=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matches_scipy_robust_fit(seed):
    """The optimum agrees with scipy's trust-region-reflective Huber fit."""
    rng = np.random.default_rng(seed)
    P = np.linspace(0.2, 9, 35)
    q = I.eval_isotherm(IsothermParams.sips(26, 0.7, 1.5), P) * (1 + 0.05 * rng.standard_normal(35))
    q[5] += 8.0  # one gross outlier engages the linear Huber branch
    fit = I.fit_isotherm("sips", P, q)
    m = I.MODELS["sips"]
    ref = least_squares(lambda th: m.f(th, P) - q, x0=[30, 0.5, 1.0], jac=lambda th: m.jac(th, P),
                        bounds=([0, 0.01, 0.5], [100, 10, 10]), loss="huber", f_scale=1.0,
                        xtol=1e-14, ftol=1e-14, gtol=1e-14, max_nfev=5000)
    ref_loss = float(np.sum(I.huber(m.f(ref.x, P) - q)))
    assert fit.loss <= ref_loss * (1 + 1e-8)
    np.testing.assert_allclose(fit.params.values, ref.x, rtol=1e-4)


@pytest.mark.parametrize("variant,truth", [("langmuir", (20, 0.5)), ("sips", (30, 0.8, 2.0))])
def test_noisy_recovery(variant, truth):
    rng = np.random.default_rng(11)
    P = np.linspace(0.1, 9, 40)
    p = IsothermParams(variant, truth)
    q = I.eval_isotherm(p, P) * (1 + 0.03 * rng.standard_normal(40))
    fit = I.fit_isotherm(variant, P, q)
    np.testing.assert_allclose(fit.params.values, truth, rtol=0.10)


def test_fit_result_json_round_trip():
    P = np.linspace(0.1, 9, 20)
    fit = I.fit_isotherm("langmuir", P, I.eval_isotherm(IsothermParams.langmuir(20, 0.5), P))
    back = FitResult.from_dict(json.loads(fit.to_json()))
    assert back.params == fit.params and back.converged == fit.converged


# ---------------------------------------------------------------- stratified


def _strata_data(qmaxes=(26, 22, 17), vols=(10, 22, 35)):
    P = np.tile(np.linspace(0.3, 9, 12), 3)
    V = np.repeat(vols, 12).astype(float)
    q = np.concatenate([I.eval_isotherm(IsothermParams.langmuir(qm, 0.6), P[:12]) for qm in qmaxes])
    return P, q, V


def test_stratified_ordering():
    fits = I.fit_stratified(*_strata_data())
    assert fits["high"].params["q_max"] > fits["medium"].params["q_max"] > fits["low"].params["q_max"]
    assert fits["high"].params["q_max"] == pytest.approx(26, rel=0.01)


def test_stratified_single_stratum():
    P, q, _ = _strata_data()
    fits = I.fit_stratified(P, q, np.full(len(P), 20.0))
    assert fits["high"] is None and fits["low"] is None and fits["medium"] is not None


def test_stratified_left_closed_boundary():
    P, q, _ = _strata_data()
    fits = I.fit_stratified(P, q, np.full(len(P), 15.0))
    assert fits["medium"] is not None and fits["high"] is None


# ---------------------------------------------------------------- ensemble


class _Fixed:
    def __init__(self, params):
        self.params = params
        self.converged = True


def test_ensemble_arithmetic():
    fits = {"langmuir": _Fixed(IsothermParams.freundlich(10, 1e9)),
            "freundlich": _Fixed(IsothermParams.freundlich(12, 1e9)),
            "sips": _Fixed(IsothermParams.freundlich(14, 1e9))}
    # with n -> large, K_F P^(1/n) ~ K_F at P = 1
    e = I.ensemble_predict(fits, np.array([1.0]))
    assert e.mean[0] == pytest.approx(12.0)
    assert e.structural_variance[0] == pytest.approx(8 / 3)


def test_ensemble_identical_and_zero():
    p = IsothermParams.langmuir(20, 0.5)
    fits = {k: _Fixed(p) for k in ("langmuir", "freundlich", "sips")}
    e = I.ensemble_predict(fits, np.array([0.0, 3.0]))
    assert e.mean[0] == 0 and np.all(e.structural_variance == 0)


def test_ensemble_requires_convergence():
    p = IsothermParams.langmuir(20, 0.5)
    fits = {k: _Fixed(p) for k in ("langmuir", "freundlich", "sips")}
    fits["sips"].converged = False
    with pytest.raises(FitError):
        I.ensemble_predict(fits, np.array([1.0]))
