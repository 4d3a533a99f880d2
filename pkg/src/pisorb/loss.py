"""Training objectives: heteroscedastic NLL, thermodynamic penalties, EWC.

Every function accepts Tensors or arrays and returns a Tensor, so the same
code serves training (gradients) and plain evaluation (``float(...)``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

PROBE_DELTA = 0.01  # MPa
LAMBDA_P_WARMUP = 0.05
LAMBDA_P_FULL = 0.2


def data_nll(q, q_hat, log_var):
    """Batch mean of (q - q_hat)^2 / (2 s2) + log(s2) / 2 with s2 = exp(log_var)."""
    q, q_hat, log_var = as_tensor(q), as_tensor(q_hat), as_tensor(log_var)
    r2 = (q - q_hat) ** 2
    return (r2 * ad.exp(-log_var) * 0.5 + log_var * 0.5).mean()


def sips_log1p(q_max, K, n, pressure):
    """log1p of the Sips isotherm, differentiable in its parameters."""
    P = np.maximum(np.asarray(pressure, dtype=float), 1e-12)
    u = ad.exp(n * ad.log(K * P))
    return ad.log1p(q_max * u / (u + 1.0))


@dataclass
class PhysicsBreakdown:
    sips: Tensor
    bounds: Tensor
    monotonicity: Tensor
    vant_hoff: Tensor

    @property
    def total(self):
        return self.sips + self.bounds + self.monotonicity + self.vant_hoff

    def values(self):
        d = {k: float(getattr(self, k).data) for k in ("sips", "bounds", "monotonicity", "vant_hoff")}
        d["total"] = sum(d.values())
        return d


def vant_hoff_slope(ln_K, temperature):
    """OLS slope of ln K against 1/T, or None with fewer than 2 distinct T."""
    inv_t = 1.0 / np.asarray(temperature, dtype=float)
    if len(np.unique(inv_t)) < 2:
        return None
    u = inv_t - inv_t.mean()
    ln_K = as_tensor(ln_K)
    return ((ln_K - ln_K.mean()) * u).sum() * (1.0 / float(np.sum(u**2)))


def physics_loss(outputs, pressures, temperatures, probe=None, delta=PROBE_DELTA):
    """Four squared-penalty constraint terms.

    ``outputs`` carries Tensors ``mean``, ``q_max``, ``K`` and ``n`` (a
    :class:`~pisorb.network.Graph` or anything with those attributes).
    ``probe(pressures)`` must return the mean-head Tensor re-evaluated at the
    given pressures with everything else held fixed; it feeds the
    monotonicity term. Pressures are in MPa, temperatures in K.
    """
    mean = as_tensor(outputs.mean)
    q_max, K, n = as_tensor(outputs.q_max), as_tensor(outputs.K), as_tensor(outputs.n)
    P = np.asarray(pressures, dtype=float)

    sips = ((mean - sips_log1p(q_max, K, n, P)) ** 2).mean()

    q_tilde = ad.expm1(mean)
    bounds = (ad.relu(-q_tilde) ** 2 + ad.relu(q_tilde - q_max) ** 2).mean()

    if probe is None:
        mono = Tensor(0.0)
    else:
        try:
            shifted = as_tensor(probe(P + delta))
        except Exception as exc:  # noqa: BLE001 - surfaced with context
            raise RuntimeError(f"monotonicity probe failed: {exc}") from exc
        mono = (ad.relu(q_tilde - ad.expm1(shifted)) ** 2).mean()

    slope = vant_hoff_slope(ad.log(K), temperatures)
    vh = Tensor(0.0) if slope is None else ad.relu(-slope) ** 2
    return PhysicsBreakdown(sips, bounds, mono, vh)


def ewc_penalty(params, anchor, fisher):
    """0.5 * sum_i F_i (theta_i - anchor_i)^2 over the tensors named in ``fisher``.

    ``params`` may map names to Tensors (training) or arrays.
    """
    total = Tensor(0.0)
    for name, F in fisher.items():
        theta = as_tensor(params[name])
        a = np.asarray(anchor[name])
        if theta.shape != a.shape or theta.shape != np.shape(F):
            raise ValueError(f"EWC shape mismatch for {name!r}: {theta.shape} vs {a.shape} vs {np.shape(F)}")
        total = total + ((theta - a) ** 2 * np.asarray(F)).sum() * 0.5
    return total


def compute_fisher_diag(per_sample_grads, n_samples=None, noise_var=1.0):
    """Diagonal Fisher: mean over samples of squared output gradients / noise_var.

    ``per_sample_grads`` is an iterable of ``{name: gradient}`` dicts, one per
    source sample (see :func:`pisorb.network.output_gradients`).
    """
    acc, count = None, 0
    for g in per_sample_grads:
        if acc is None:
            acc = {k: np.zeros_like(v, dtype=float) for k, v in g.items()}
        for k, v in g.items():
            acc[k] += np.asarray(v, dtype=float) ** 2
        count += 1
    if count == 0:
        raise ValueError("Fisher information needs a non-empty source dataset")
    return {k: v / (count * noise_var) for k, v in acc.items()}


def lambda_p_schedule(t, phase):
    """Physics weight at phase-local epoch ``t``.

    warmup: 0.05; finetune: 0.05 + 0.15 (1 - exp(-(t - 50)/50)), held at 0.05
    before epoch 50; full: 0.2.
    """
    if t < 0:
        raise ValueError("epoch must be >= 0")
    if phase == "warmup":
        return LAMBDA_P_WARMUP
    if phase == "finetune":
        if t < 50:
            return LAMBDA_P_WARMUP
        return 0.05 + 0.15 * (1.0 - math.exp(-(t - 50) / 50.0))
    if phase == "full":
        return LAMBDA_P_FULL
    raise ValueError(f"unknown phase {phase!r}")


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 0.0
    lambda_reg: float = 0.0
    epoch: int = 0


def total_loss(data, physics, ewc, weights):
    """data + lambda_p * physics + lambda_reg * ewc."""
    physics_total = physics.total if isinstance(physics, PhysicsBreakdown) else as_tensor(physics)
    parts = {"data": as_tensor(data), "physics": physics_total, "ewc": as_tensor(ewc)}
    for name, t in parts.items():
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite {name} loss")
    return parts["data"] + parts["physics"] * weights.lambda_p + parts["ewc"] * weights.lambda_reg
