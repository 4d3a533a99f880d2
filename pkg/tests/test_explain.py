import numpy as np
import pytest

from pisorb.explain import (
    ShapMatrix,
    ale_curve,
    ale_edges,
    all_coalitions,
    explanation_bundle,
    kernel_shap,
    sample_coalitions,
    shap_ale_agreement,
    shap_summary,
    shapley_kernel_weight,
)

W = np.array([0.5, -1.2, 2.0, 0.0, 0.3, -0.7, 1.1, 0.05, -0.4, 0.9, 0.0, 1.6])


def linear(X):
    return np.asarray(X) @ W + 0.25


def additive_parts(X):
    return np.sin(2 * X[:, 0]), 0.5 * X[:, 1] ** 2


def additive(X):
    g, h = additive_parts(X)
    return g + h


# ---------------------------------------------------------------- SHAP


def test_kernel_weights():
    assert shapley_kernel_weight(4, 0) == np.inf
    assert shapley_kernel_weight(4, 2) == pytest.approx(3 / (6 * 2 * 2))
    Z, w = all_coalitions(4)
    assert len(Z) == 2**4 - 2 and np.all(w > 0)


def test_sampled_coalitions_complement_pairs():
    Z, counts = sample_coalitions(12, 100, np.random.default_rng(0))
    assert counts.sum() == 100
    rows = {tuple(z) for z in Z}
    assert all(tuple(~np.array(z)) in rows for z in rows)
    assert np.all(Z.sum(axis=1) > 0) and np.all(Z.sum(axis=1) < 12)


def test_linear_shap_exact(rng):
    bg = rng.normal(size=(100, 12))
    X = rng.normal(size=(5, 12))
    s = kernel_shap(linear, X, bg, exact=True)
    np.testing.assert_allclose(s.phi, W * (X - bg.mean(axis=0)), atol=1e-6)
    assert np.max(s.efficiency_residual()) < 1e-9


def test_sampled_shap_efficiency_and_determinism(rng):
    bg = rng.normal(size=(30, 12))
    X = rng.normal(size=(4, 12))
    a = kernel_shap(additive, X, bg, n_coalitions=100, seed=3)
    b = kernel_shap(additive, X, bg, n_coalitions=100, seed=3)
    np.testing.assert_array_equal(a.phi, b.phi)
    assert np.max(a.efficiency_residual()) < 1e-9


def test_constant_model():
    bg = np.random.default_rng(1).normal(size=(10, 12))
    s = kernel_shap(lambda X: np.full(len(X), 4.2), bg[:3], bg, exact=True)
    np.testing.assert_allclose(s.phi, 0, atol=1e-12)
    assert s.base == pytest.approx(4.2, abs=1e-12)


def test_symmetric_model(rng):
    bg = rng.normal(size=(50, 12))
    X = rng.normal(size=(30, 12))
    # swapped copies make the explained rows exchangeable in features 0 and 1
    X = np.vstack([X, X[:, [1, 0] + list(range(2, 12))]])
    s = kernel_shap(lambda Z: Z[:, 0] + Z[:, 1], X, bg, n_coalitions=100, seed=0)
    a, b = np.abs(s.phi[:, 0]).mean(), np.abs(s.phi[:, 1]).mean()
    assert abs(a - b) / max(a, b) < 0.05


def test_empty_background():
    with pytest.raises(ValueError):
        kernel_shap(linear, np.zeros((1, 12)), np.zeros((0, 12)))


def test_model_object_accepted(rng):
    class M:
        def predict(self, X):
            return linear(X)

    bg = rng.normal(size=(20, 12))
    np.testing.assert_allclose(kernel_shap(M(), bg[:2], bg, exact=True).phi,
                               kernel_shap(linear, bg[:2], bg, exact=True).phi)


# ---------------------------------------------------------------- summary


def test_summary_single_column():
    phi = np.zeros((5, 3))
    phi[:, 1] = [1, -2, 3, -4, 5]
    s = shap_summary(phi)
    assert s.ranking[0] == 1 and s.importance[1] == pytest.approx(3.0)
    assert s.share.sum() == pytest.approx(100, abs=1e-9)
    assert s.positive_pct[1] == 60 and s.negative_pct[1] == 40


def test_summary_duplicate_columns(rng):
    col = rng.normal(size=20)
    phi = np.column_stack([col, col, rng.normal(size=20)])
    s = shap_summary(ShapMatrix(phi, 0.0, np.zeros(20)))
    assert s.interaction[0, 1] == pytest.approx(1.0)
    assert any(i == 0 and j == 1 for i, j, _ in s.strong_pairs)
    with pytest.raises(ValueError):
        shap_summary(np.zeros((0, 3)))


# ---------------------------------------------------------------- ALE


def test_ale_null_feature(rng):
    X = rng.normal(size=(500, 12))
    c = ale_curve(linear, X, 3)
    assert c.effect_range == 0 and np.all(c.values == 0)


def test_ale_linear(rng):
    X = rng.normal(size=(2000, 12))
    c = ale_curve(linear, X, 2)
    np.testing.assert_allclose(c.slopes(), W[2], rtol=0.01)
    assert c.curvature < 1e-6
    assert abs(c.weighted_mean()) < 1e-10


def test_ale_additive_components():
    X = np.random.default_rng(0).uniform(-1.5, 1.5, size=(10_000, 12))
    for j, part in ((0, lambda z: np.sin(2 * z)), (1, lambda z: 0.5 * z**2)):
        c = ale_curve(additive, X, j)
        truth = part(c.edges)
        rng_ = truth.max() - truth.min()
        # align means: the curve is centered, the component is not
        dev = (c.values - c.values.mean()) - (truth - truth.mean())
        assert np.max(np.abs(dev)) < 0.02 * rng_
        assert c.curvature > 1e-3


def test_ale_tied_values_and_constant(rng):
    X = rng.normal(size=(300, 12))
    X[:, 4] = rng.integers(0, 3, 300)
    c = ale_curve(linear, X, 4)
    assert len(c.edges) == 3 and np.all(np.diff(c.edges) > 0)
    assert c.counts.sum() == 300
    X[:, 5] = 7.0
    flat = ale_curve(linear, X, 5)
    assert flat.flat and flat.effect_range == 0


def test_ale_edges_quantiles():
    np.testing.assert_allclose(ale_edges(np.arange(101.0), 4), [0, 25, 50, 75, 100])


# ---------------------------------------------------------------- agreement


def test_agreement_extremes():
    imp = np.arange(1.0, 13.0)
    assert shap_ale_agreement(imp, imp).rho == pytest.approx(1.0)
    assert shap_ale_agreement(imp, imp[::-1]).rho == pytest.approx(-1.0)
    ag = shap_ale_agreement(imp, imp, vif=np.full(12, 2.0))
    assert ag.table[0]["vif"] == 2.0 and ag.table[0]["rank_delta"] == 0
    with pytest.raises(ValueError):
        shap_ale_agreement(imp, imp[:5])


def test_bundle_serializable(rng):
    import json

    bg = rng.normal(size=(20, 12))
    s = kernel_shap(linear, bg[:3], bg, exact=True)
    curves = [ale_curve(linear, bg, j, n_bins=5) for j in range(12)]
    ag = shap_ale_agreement(shap_summary(s).importance, [c.effect_range for c in curves])
    doc = json.loads(json.dumps(explanation_bundle(s, shap_summary(s), curves, ag)))
    assert len(doc["features"]) == 12 and len(doc["ale"]) == 12
