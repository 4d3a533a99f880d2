"""Predictive uncertainty: MC Dropout, joint aleatoric + epistemic Gaussians,
temperature scaling and calibration metrics. All quantities live in log1p
space unless a name says otherwise."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .network import Mode

LEVELS = (0.68, 0.90, 0.95, 0.99)
Z_VALUES = (0.9945, 1.6449, 1.9600, 2.5758)
TAU_GRID = np.round(np.arange(0.10, 3.0 + 1e-9, 0.01), 2)
INV_SQRT_PI = 1.0 / math.sqrt(math.pi)


def norm_cdf(z):
    return special.ndtr(z)


def norm_pdf(z):
    return np.exp(-0.5 * np.asarray(z) ** 2) / math.sqrt(2 * math.pi)


# ---------------------------------------------------------------- MC dropout


def mc_dropout_predict(net, X, n_mc=100, seed=0):
    """``n_mc`` dropout-active forward passes.

    Returns ``(means, log_vars)``, each shaped ``(n_mc, n_rows)``. Pass ``j``
    uses seed ``[seed, j]``.
    """
    if n_mc < 2:
        raise ValueError("n_mc must be at least 2")
    X = np.asarray(X, dtype=float)
    means = np.empty((n_mc, len(X)))
    log_vars = np.empty((n_mc, len(X)))
    for j in range(n_mc):
        out = net.forward(X, Mode.MC_DROPOUT, rng_seed=[seed, j])
        means[j], log_vars[j] = out.mean, out.log_var
    return means, log_vars


@dataclass
class PredictiveDistribution:
    mean: np.ndarray
    sigma_epistemic: np.ndarray
    sigma_aleatoric: np.ndarray
    tau: float = 1.0
    n_mc: int = 0

    @property
    def sigma_total(self):
        return np.sqrt(self.sigma_epistemic**2 + self.sigma_aleatoric**2)

    @property
    def sigma(self):
        """Calibrated total standard deviation, ``tau * sigma_total``."""
        return self.tau * self.sigma_total

    def with_tau(self, tau):
        return PredictiveDistribution(self.mean, self.sigma_epistemic, self.sigma_aleatoric, float(tau), self.n_mc)

    def epistemic_fraction(self):
        """Mean share of epistemic variance in total variance (0..1)."""
        tot = self.sigma_total**2
        share = np.divide(self.sigma_epistemic**2, tot, out=np.zeros_like(tot), where=tot > 0)
        return float(np.mean(share))

    def interval(self, z):
        s = self.sigma
        return self.mean - z * s, self.mean + z * s

    def records(self):
        """Per-sample rows with 68%/95% intervals in log1p and original units."""
        lo68, hi68 = self.interval(Z_VALUES[0])
        lo95, hi95 = self.interval(Z_VALUES[2])
        rows = []
        for i in range(len(self.mean)):
            rows.append({
                "mean": float(self.mean[i]),
                "mean_original": float(np.expm1(self.mean[i])),
                "sigma_epistemic": float(self.sigma_epistemic[i]),
                "sigma_aleatoric": float(self.sigma_aleatoric[i]),
                "sigma_total": float(self.sigma_total[i]),
                "tau": self.tau,
                "pi68": [float(lo68[i]), float(hi68[i])],
                "pi95": [float(lo95[i]), float(hi95[i])],
                "pi68_original": [float(np.expm1(lo68[i])), float(np.expm1(hi68[i]))],
                "pi95_original": [float(np.expm1(lo95[i])), float(np.expm1(hi95[i]))],
            })
        return rows


def propagate_joint(means, log_vars):
    """Moment-match the per-pass Gaussians into one Gaussian per sample.

    The epistemic part is the sample SD (ddof=1) of the pass means; the
    aleatoric variance is the pass average of ``exp(log_var)``.
    """
    means = np.asarray(means, dtype=float)
    log_vars = np.asarray(log_vars, dtype=float)
    if means.shape[0] < 2:
        raise ValueError("need at least 2 passes")
    # statistics of deviations from the first pass: identical passes give exact zeros
    dev = means - means[0]
    return PredictiveDistribution(
        mean=means[0] + dev.mean(axis=0),
        sigma_epistemic=dev.std(axis=0, ddof=1),
        sigma_aleatoric=np.sqrt(np.exp(log_vars).mean(axis=0)),
        tau=1.0,
        n_mc=means.shape[0],
    )


# ---------------------------------------------------------------- calibration


def coverage(pred, targets, z_values=Z_VALUES):
    y = np.asarray(targets, dtype=float)
    err = np.abs(y - pred.mean)
    s = pred.sigma
    return np.array([float(np.mean(err <= z * s)) for z in z_values])


def ece_from_coverage(cov, levels=LEVELS):
    return float(np.mean(np.abs(np.asarray(cov) - np.asarray(levels))))


def expected_calibration_error(pred, targets):
    return ece_from_coverage(coverage(pred, targets))


def fit_temperature(pred, targets, grid=TAU_GRID):
    """Grid value of tau minimizing ECE; the smallest tau wins ties."""
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("temperature grid is empty")
    y = np.asarray(targets, dtype=float)
    err = np.abs(y - pred.mean)
    s = pred.sigma_total
    z = np.asarray(Z_VALUES)
    # covered[t, l] = fraction with err <= tau_t * z_l * s
    ratio = np.divide(err, s, out=np.full_like(err, np.inf), where=s > 0)
    ratio = np.where((s == 0) & (err == 0), 0.0, ratio)
    covered = (ratio[None, None, :] <= grid[:, None, None] * z[None, :, None]).mean(axis=2)
    eces = np.abs(covered - np.asarray(LEVELS)[None, :]).mean(axis=1)
    return float(grid[int(np.argmin(eces))])


def gaussian_crps(y, mu, sigma):
    """Closed-form CRPS of N(mu, sigma^2) at y."""
    sigma = np.asarray(sigma, dtype=float)
    z = (np.asarray(y, dtype=float) - mu) / sigma
    return sigma * (z * (2 * norm_cdf(z) - 1) + 2 * norm_pdf(z) - INV_SQRT_PI)


def crps_monte_carlo(y, mu, sigma, n=100_000, seed=0):
    """CRPS = E|X - y| - E|X - X'|/2 estimated from ``n`` draws."""
    rng = np.random.default_rng(seed)
    x = rng.normal(mu, sigma, size=n)
    x2 = rng.normal(mu, sigma, size=n)
    return float(np.mean(np.abs(x - y)) - 0.5 * np.mean(np.abs(x - x2)))


def spearman(a, b):
    """Spearman rank correlation with average ranks for ties."""
    with warnings.catch_warnings():
        # constant inputs give nan, which is the intended report value
        warnings.simplefilter("ignore", stats.ConstantInputWarning)
        rho = stats.spearmanr(a, b).statistic
    return float(rho)


@dataclass
class CalibrationReport:
    ece: float
    coverage: dict
    tau: float
    sharpness: float
    spearman: float
    nll: float
    crps: float
    epistemic_fraction: float
    nll_flagged: bool = False

    def to_dict(self):
        return dict(self.__dict__)

    def is_good(self):
        return self.ece <= 0.10 and all(abs(c - float(k) / 100) <= 0.05 for k, c in self.coverage.items())


def calibration_metrics(pred, targets):
    """Metrics of the calibrated Gaussian ``N(mean, (tau sigma_total)^2)``."""
    y = np.asarray(targets, dtype=float)
    if len(y) < 20:
        raise ValueError("calibration metrics need at least 20 samples")
    s = pred.sigma
    err = y - pred.mean
    cov = coverage(pred, y)
    flagged = bool(np.any((s == 0) & (err != 0)))
    with np.errstate(divide="ignore", invalid="ignore"):
        nll_i = err**2 / (2 * s**2) + 0.5 * np.log(2 * np.pi * s**2)
        crps_i = np.where(s > 0, gaussian_crps(y, pred.mean, np.where(s > 0, s, 1.0)), np.abs(err))
    nll_i = np.where((s == 0) & (err == 0), -np.inf, nll_i)
    nll = float(np.mean(nll_i)) if not flagged else math.inf
    return CalibrationReport(
        ece=ece_from_coverage(cov),
        coverage={f"{int(round(l * 100))}": float(c) for l, c in zip(LEVELS, cov)},
        tau=pred.tau,
        sharpness=float(np.mean(2 * Z_VALUES[2] * s)),
        spearman=spearman(np.abs(err), pred.sigma_total),
        nll=nll,
        crps=float(np.mean(crps_i)),
        epistemic_fraction=pred.epistemic_fraction(),
        nll_flagged=flagged,
    )


def reliability_table(pred, targets, levels=np.linspace(0.05, 0.99, 20)):
    """Nominal vs empirical central-interval coverage (for reliability plots)."""
    z = stats.norm.ppf(0.5 + np.asarray(levels) / 2)
    cov = coverage(pred, targets, z)
    return [{"nominal": float(l), "empirical": float(c)} for l, c in zip(levels, cov)]


# ---------------------------------------------------------------- Laplace


def laplace_diag(per_sample_grads, fisher, n_data, prior_precision):
    """Delta-method epistemic SD from a diagonal Laplace posterior.

    The posterior variance of parameter ``i`` is ``1/(F_i n + prior)``;
    ``per_sample_grads`` yields ``{name: d mean / d theta}`` per sample.
    """
    if math.isinf(prior_precision):
        return np.array([0.0 for _ in per_sample_grads])
    post_var = {}
    for k, F in fisher.items():
        prec = np.asarray(F, dtype=float) * n_data + prior_precision
        if np.any(prec <= 0):
            raise ValueError(f"zero posterior precision in {k!r}: Fisher and prior are both zero")
        post_var[k] = 1.0 / prec
    sig = []
    for g in per_sample_grads:
        var = sum(float(np.sum(np.asarray(g[k]) ** 2 * post_var[k])) for k in post_var)
        sig.append(math.sqrt(var))
    return np.array(sig)
