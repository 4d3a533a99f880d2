"""Synthetic Sips-family sorption data and a synthetic transfer source.

Each experiment is one coal sample at one temperature. Composition follows
rank: volatile matter sets the rank, moisture rises with volatile matter and
ash is independent. Uptake follows a Sips isotherm whose capacity depends on
composition and whose affinity follows a van't Hoff law in temperature.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .dataset import R_GAS, Dataset, Measurement
from .isotherm import IsothermParams, eval_isotherm

TEMPERATURES = (293.15, 298.15, 303.15, 308.15, 313.15, 318.15, 323.15)


@dataclass(frozen=True)
class GasSpec:
    """Constants of one synthetic gas/sorbent system."""

    name: str = "methane"
    q_base: float = 22.0  # m3/t at zero volatile/moisture correction
    alpha_v: float = -0.45  # capacity change per unit volatile/30
    alpha_m: float = 0.35  # capacity loss per unit moisture/6
    K_ref: float = 0.55  # MPa^-1 at T_ref
    dH: float = 14000.0  # J/mol, isosteric heat (positive = exothermic)
    T_ref: float = 303.15
    n_mean: float = 0.95
    n_spread: float = 0.1
    p_max: float = 9.0


METHANE = GasSpec()
# surrogate source gas: weaker, lower-capacity physisorption
SURROGATE = GasSpec("surrogate", q_base=9.0, alpha_v=-0.35, alpha_m=0.3, K_ref=0.25, dH=6000.0,
                    n_mean=1.0, n_spread=0.08, p_max=9.0)


def affinity(gas, temperature):
    return gas.K_ref * np.exp(gas.dH / R_GAS * (1.0 / np.asarray(temperature) - 1.0 / gas.T_ref))


def capacity(gas, volatile, moisture):
    return gas.q_base * np.maximum(1.0 + gas.alpha_v * volatile / 30.0 - gas.alpha_m * moisture / 6.0, 0.05)


def sample_composition(rng):
    volatile = float(np.clip(rng.gamma(4.0, 5.5), 5.0, 40.0))
    moisture = float(np.clip(0.5 + 0.18 * volatile + rng.normal(0, 1.2), 0.0, 10.5))
    ash = float(np.clip(rng.normal(13.0, 6.0), 2.8, 30.0))
    return volatile, moisture, ash


def synthesize(n_experiments=40, points=9, seed=0, gas=METHANE, noise=0.03, prefix="E"):
    """Generate a :class:`Dataset`.

    ``noise`` is the standard deviation of multiplicative Gaussian noise on
    the adsorption (0 gives exact isotherm values).
    """
    rng = np.random.default_rng(seed)
    rows = []
    for e in range(n_experiments):
        volatile, moisture, ash = sample_composition(rng)
        T = float(rng.choice(TEMPERATURES))
        qm = float(capacity(gas, volatile, moisture))
        K = float(affinity(gas, T))
        n = float(np.clip(rng.normal(gas.n_mean, gas.n_spread), 0.55, 2.0))
        P = np.sort(rng.uniform(0.2, gas.p_max, size=points))
        q = eval_isotherm(IsothermParams.sips(qm, K, n), P)
        if noise > 0:
            q = q * (1.0 + noise * rng.standard_normal(points))
        q = np.maximum(q, 0.0)
        eid = f"{prefix}{e:03d}"
        rows.extend(Measurement(eid, T, float(p), moisture, ash, volatile, float(v)) for p, v in zip(P, q))
    return Dataset.from_measurements(rows)


def synthesize_noiseless_sips(params, n_experiments=10, points=9, seed=0, temperature=303.15):
    """Fixed composition and one shared Sips isotherm across all experiments."""
    rng = np.random.default_rng(seed)
    rows = []
    for e in range(n_experiments):
        P = np.sort(rng.uniform(0.2, 9.0, size=points))
        q = eval_isotherm(params, P)
        rows.extend(Measurement(f"S{e:03d}", temperature, float(p), 1.0, 10.0, 20.0, float(v)) for p, v in zip(P, q))
    return Dataset.from_measurements(rows)


def scaled_gas(gas, factor):
    """Same gas with energy constants scaled (affinity and heat)."""
    return replace(gas, name=f"{gas.name}x{factor:g}", K_ref=gas.K_ref * factor, dH=gas.dH * factor)
