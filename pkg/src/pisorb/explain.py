"""Kernel SHAP attributions and accumulated local effects (ALE)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .dataset import FEATURE_NAMES


def _as_predict(model):
    return model.predict if hasattr(model, "predict") else model


# ---------------------------------------------------------------- Kernel SHAP


def shapley_kernel_weight(m, s):
    """Kernel weight of a coalition of size ``s`` among ``m`` features."""
    if s == 0 or s == m:
        return math.inf
    return (m - 1) / (math.comb(m, s) * s * (m - s))


def all_coalitions(m):
    """Every proper, non-empty coalition with its exact kernel weight."""
    Z, w = [], []
    for s in range(1, m):
        ws = shapley_kernel_weight(m, s)
        for idx in itertools.combinations(range(m), s):
            z = np.zeros(m, dtype=bool)
            z[list(idx)] = True
            Z.append(z)
            w.append(ws)
    return np.array(Z), np.array(w)


def sample_coalitions(m, n, rng):
    """``n`` coalitions drawn from the Shapley kernel, in complement pairs.

    Sizes are drawn with probability proportional to ``(m-1)/(s(m-s))``; the
    members of each coalition are uniform given its size. Duplicates are
    merged, with their multiplicity as weight.
    """
    sizes = np.arange(1, m)
    p = (m - 1) / (sizes * (m - sizes))
    p = p / p.sum()
    rows = []
    while len(rows) < n:
        s = int(rng.choice(sizes, p=p))
        z = np.zeros(m, dtype=bool)
        z[rng.choice(m, size=s, replace=False)] = True
        rows.append(z)
        if len(rows) < n:
            rows.append(~z)
    Z, counts = np.unique(np.array(rows), axis=0, return_counts=True)
    return Z, counts.astype(float)


def _coalition_values(f, x, Z, background):
    """Mean model output over background rows with features outside each
    coalition taken from the background."""
    k, m = Z.shape
    b = len(background)
    X = np.where(Z[:, None, :], x[None, None, :], background[None, :, :]).reshape(k * b, m)
    return f(X).reshape(k, b).mean(axis=1)


def _constrained_wls(Z, y, w, total):
    """argmin_phi sum w (y - Z phi)^2 subject to sum(phi) = total."""
    m = Z.shape[1]
    A = Z.T @ (Z * w[:, None])
    rhs = Z.T @ (w * y)
    kkt = np.zeros((m + 1, m + 1))
    kkt[:m, :m] = A
    kkt[:m, m] = 1.0
    kkt[m, :m] = 1.0
    sol = np.linalg.lstsq(kkt, np.append(rhs, total), rcond=None)[0]
    phi = sol[:m]
    # remove the rounding residue of the equality constraint
    return phi + (total - phi.sum()) / m


@dataclass
class ShapMatrix:
    phi: np.ndarray  # (n_samples, n_features)
    base: float
    predictions: np.ndarray

    def efficiency_residual(self):
        return np.abs(self.base + self.phi.sum(axis=1) - self.predictions)


def kernel_shap(model, X, background, n_coalitions=100, seed=0, exact=False):
    """Kernel SHAP attributions for each row of ``X``.

    ``exact=True`` enumerates all ``2^m - 2`` coalitions with exact kernel
    weights (feasible for m <= 12). Attributions always satisfy
    ``base + sum(phi) == f(x)`` to rounding.
    """
    f = _as_predict(model)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    background = np.atleast_2d(np.asarray(background, dtype=float))
    if len(background) == 0:
        raise ValueError("background set is empty")
    m = X.shape[1]
    base = float(np.mean(f(background)))
    preds = np.asarray(f(X), dtype=float)
    rng = np.random.default_rng(seed)
    if exact:
        Z_all, w_all = all_coalitions(m)
    phi = np.empty_like(X)
    for i, x in enumerate(X):
        if exact:
            Z, w = Z_all, w_all
        else:
            Z, w = sample_coalitions(m, n_coalitions, rng)
        v = _coalition_values(f, x, Z, background)
        phi[i] = _constrained_wls(Z.astype(float), v - base, w, preds[i] - base)
    return ShapMatrix(phi, base, preds)


@dataclass
class ShapSummary:
    importance: np.ndarray
    share: np.ndarray  # percent, sums to 100
    ranking: list  # feature indices, most important first
    interaction: np.ndarray  # Pearson correlation between attribution columns
    strong_pairs: list  # (i, j, rho) with rho > 0.5
    positive_pct: np.ndarray
    negative_pct: np.ndarray


def shap_summary(phi, threshold=0.5):
    phi = np.asarray(phi.phi if isinstance(phi, ShapMatrix) else phi, dtype=float)
    if phi.size == 0:
        raise ValueError("empty attribution matrix")
    imp = np.abs(phi).mean(axis=0)
    total = imp.sum()
    share = imp / total * 100 if total > 0 else np.zeros_like(imp)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.corrcoef(phi, rowvar=False)
    corr = np.nan_to_num(np.atleast_2d(corr), nan=0.0)
    m = phi.shape[1]
    pairs = [(i, j, float(corr[i, j])) for i in range(m) for j in range(i + 1, m) if corr[i, j] > threshold]
    return ShapSummary(
        importance=imp,
        share=share,
        ranking=[int(i) for i in np.argsort(-imp, kind="stable")],
        interaction=corr,
        strong_pairs=pairs,
        positive_pct=(phi > 0).mean(axis=0) * 100,
        negative_pct=(phi < 0).mean(axis=0) * 100,
    )


# ---------------------------------------------------------------- ALE


@dataclass
class AleCurve:
    feature: int
    edges: np.ndarray
    values: np.ndarray  # centered accumulated effect at each edge
    counts: np.ndarray  # samples per bin
    effect_range: float
    curvature: float
    flat: bool = False

    def slopes(self):
        return np.diff(self.values) / np.diff(self.edges)

    def weighted_mean(self):
        """Bin-count weighted mean of the curve (0 after centering)."""
        if self.counts.sum() == 0:
            return 0.0
        mids = 0.5 * (self.values[:-1] + self.values[1:])
        return float(np.sum(self.counts * mids) / self.counts.sum())

    def to_dict(self):
        return {
            "feature": self.feature,
            "edges": self.edges.tolist(),
            "values": self.values.tolist(),
            "counts": self.counts.tolist(),
            "effect_range": self.effect_range,
            "curvature": self.curvature,
            "flat": self.flat,
        }


def ale_edges(x, n_bins):
    """Linear-interpolation quantile edges with repeated values merged."""
    return np.unique(np.quantile(x, np.linspace(0, 1, n_bins + 1), method="linear"))


def ale_curve(model, X, feature, n_bins=50):
    """First-order ALE of column ``feature`` over the rows of ``X``.

    The curve is evaluated at the bin edges; curvature is the mean absolute
    change between successive bin slopes.
    """
    f = _as_predict(model)
    X = np.asarray(X, dtype=float)
    x = X[:, feature]
    edges = ale_edges(x, n_bins)
    if len(edges) < 2:
        return AleCurve(feature, edges, np.zeros(len(edges)), np.array([len(x)]), 0.0, 0.0, flat=True)
    k = len(edges) - 1
    # bin 0 is [z0, z1]; bin i > 0 is (z_i, z_{i+1}]
    idx = np.clip(np.searchsorted(edges, x, side="left") - 1, 0, k - 1)
    lo, hi = X.copy(), X.copy()
    lo[:, feature] = edges[idx]
    hi[:, feature] = edges[idx + 1]
    diff = f(hi) - f(lo)
    counts = np.bincount(idx, minlength=k).astype(float)
    sums = np.bincount(idx, weights=diff, minlength=k)
    delta = np.divide(sums, counts, out=np.zeros(k), where=counts > 0)
    acc = np.concatenate([[0.0], np.cumsum(delta)])
    centre = np.sum(counts * 0.5 * (acc[:-1] + acc[1:])) / counts.sum()
    values = acc - centre
    slopes = delta / np.diff(edges)
    curvature = float(np.mean(np.abs(np.diff(slopes)))) if k > 1 else 0.0
    return AleCurve(feature, edges, values, counts, float(values.max() - values.min()), curvature)


# ---------------------------------------------------------------- agreement


@dataclass
class Agreement:
    rho: float
    p_value: float
    table: list  # per feature: name, shap rank, ale rank, delta, vif


def shap_ale_agreement(importances, ranges, names=FEATURE_NAMES, vif=None):
    imp = np.asarray(importances, dtype=float)
    rng_ = np.asarray(ranges, dtype=float)
    if imp.shape != rng_.shape:
        raise ValueError("importance and range vectors differ in length")
    res = stats.spearmanr(imp, rng_)
    r_shap = stats.rankdata(-imp, method="average")
    r_ale = stats.rankdata(-rng_, method="average")
    table = []
    for j in range(len(imp)):
        table.append({
            "feature": names[j] if j < len(names) else str(j),
            "shap_rank": float(r_shap[j]),
            "ale_rank": float(r_ale[j]),
            "rank_delta": float(r_shap[j] - r_ale[j]),
            "vif": None if vif is None else float(vif[j]),
        })
    return Agreement(float(res.statistic), float(res.pvalue), table)


def explanation_bundle(shap, summary, curves, agreement, names=FEATURE_NAMES):
    return {
        "features": list(names),
        "phi": shap.phi.tolist(),
        "base": shap.base,
        "importance": [
            {"feature": names[j], "importance": float(summary.importance[j]), "share_pct": float(summary.share[j]),
             "positive_pct": float(summary.positive_pct[j]), "negative_pct": float(summary.negative_pct[j])}
            for j in summary.ranking
        ],
        "interaction": summary.interaction.tolist(),
        "strong_pairs": [{"a": names[i], "b": names[j], "rho": r} for i, j, r in summary.strong_pairs],
        "ale": [c.to_dict() for c in curves],
        "agreement": {"spearman": agreement.rho, "p_value": agreement.p_value, "table": agreement.table},
    }
