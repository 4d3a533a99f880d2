"""Classical adsorption isotherms and their bounded robust least-squares fits.

Models (q in m3/t, P in MPa)::

    langmuir       q = q_max K P / (1 + K P)
    freundlich     q = K_F P^(1/n)
    sips           q = q_max (K P)^n / (1 + (K P)^n)
    comp_langmuir  langmuir with q_max -> q_base (1 + a_V V/30 - a_M M/6)
    comp_sips      sips with the same compositional capacity

V and M are volatile matter and moisture in wt%.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

HUBER_DELTA = 1.0
MAX_NFEV = 5000
VOLATILE_NORM = 30.0
MOISTURE_NORM = 6.0

Q_BOUNDS = (0.0, 100.0)
K_BOUNDS = (0.01, 10.0)
N_BOUNDS = (0.5, 10.0)
KF_BOUNDS = (1e-6, 1e3)
ALPHA_BOUNDS = (-10.0, 10.0)

_TINY = 1e-300


class FitError(ValueError):
    pass


# ---------------------------------------------------------------- model zoo


def _lang(theta, P, comp=None):
    qm, K = theta
    kp = K * P
    return qm * kp / (1.0 + kp)


def _lang_jac(theta, P, comp=None):
    qm, K = theta
    kp = K * P
    return np.column_stack([kp / (1 + kp), qm * P / (1 + kp) ** 2])


def _freund(theta, P, comp=None):
    kf, n = theta
    out = np.zeros_like(P, dtype=float)
    pos = P > 0
    out[pos] = kf * P[pos] ** (1.0 / n)
    return out


def _freund_jac(theta, P, comp=None):
    kf, n = theta
    J = np.zeros((len(P), 2))
    pos = P > 0
    pw = P[pos] ** (1.0 / n)
    J[pos, 0] = pw
    J[pos, 1] = -kf * pw * np.log(P[pos]) / n**2
    return J


def _sips_core(qm, K, n, P):
    kp = np.maximum(K * P, 0.0)
    with np.errstate(divide="ignore"):
        lkp = np.where(kp > 0, np.log(np.maximum(kp, _TINY)), -np.inf)
    u = np.where(kp > 0, np.exp(n * np.where(kp > 0, lkp, 0.0)), 0.0)
    return kp, lkp, u


def _sips(theta, P, comp=None):
    qm, K, n = theta
    _, _, u = _sips_core(qm, K, n, P)
    return qm * u / (1.0 + u)


def _sips_jac(theta, P, comp=None):
    qm, K, n = theta
    kp, lkp, u = _sips_core(qm, K, n, P)
    frac = u / (1 + u)
    dfrac_du = 1.0 / (1 + u) ** 2
    du_dK = np.where(kp > 0, n * u / K, 0.0)
    du_dn = np.where(kp > 0, u * np.where(kp > 0, lkp, 0.0), 0.0)
    return np.column_stack([frac, qm * dfrac_du * du_dK, qm * dfrac_du * du_dn])


def capacity_factor(a_v, a_m, comp):
    volatile, moisture = comp
    return 1.0 + a_v * np.asarray(volatile) / VOLATILE_NORM - a_m * np.asarray(moisture) / MOISTURE_NORM


def _need_comp(comp):
    if comp is None:
        raise FitError("compositional isotherm needs (volatile, moisture)")


def _comp_lang(theta, P, comp=None):
    _need_comp(comp)
    qb, K, av, am = theta
    qeff = np.maximum(qb * capacity_factor(av, am, comp), 0.0)
    return _lang((1.0, K), P) * qeff


def _comp_lang_jac(theta, P, comp=None):
    _need_comp(comp)
    qb, K, av, am = theta
    cf = capacity_factor(av, am, comp)
    active = (qb * cf > 0).astype(float)
    base = _lang((1.0, K), P)
    dbase_dK = _lang_jac((1.0, K), P)[:, 1]
    v, m = (np.asarray(c, float) for c in comp)
    return np.column_stack([
        base * cf * active,
        qb * cf * active * dbase_dK,
        base * qb * v / VOLATILE_NORM * active,
        -base * qb * m / MOISTURE_NORM * active,
    ])


def _comp_sips(theta, P, comp=None):
    _need_comp(comp)
    qb, K, n, av, am = theta
    qeff = np.maximum(qb * capacity_factor(av, am, comp), 0.0)
    return _sips((1.0, K, n), P) * qeff


def _comp_sips_jac(theta, P, comp=None):
    _need_comp(comp)
    qb, K, n, av, am = theta
    cf = capacity_factor(av, am, comp)
    active = (qb * cf > 0).astype(float)
    base = _sips((1.0, K, n), P)
    jb = _sips_jac((1.0, K, n), P)
    v, m = (np.asarray(c, float) for c in comp)
    return np.column_stack([
        base * cf * active,
        qb * cf * active * jb[:, 1],
        qb * cf * active * jb[:, 2],
        base * qb * v / VOLATILE_NORM * active,
        -base * qb * m / MOISTURE_NORM * active,
    ])


@dataclass(frozen=True)
class _Model:
    names: tuple
    bounds: tuple
    f: object
    jac: object
    compositional: bool = False


MODELS = {
    "langmuir": _Model(("q_max", "K"), (Q_BOUNDS, K_BOUNDS), _lang, _lang_jac),
    "freundlich": _Model(("K_F", "n"), (KF_BOUNDS, N_BOUNDS), _freund, _freund_jac),
    "sips": _Model(("q_max", "K", "n"), (Q_BOUNDS, K_BOUNDS, N_BOUNDS), _sips, _sips_jac),
    "comp_langmuir": _Model(
        ("q_base", "K", "alpha_V", "alpha_M"),
        (Q_BOUNDS, K_BOUNDS, ALPHA_BOUNDS, ALPHA_BOUNDS),
        _comp_lang, _comp_lang_jac, True,
    ),
    "comp_sips": _Model(
        ("q_base", "K", "n", "alpha_V", "alpha_M"),
        (Q_BOUNDS, K_BOUNDS, N_BOUNDS, ALPHA_BOUNDS, ALPHA_BOUNDS),
        _comp_sips, _comp_sips_jac, True,
    ),
}


@dataclass(frozen=True)
class IsothermParams:
    variant: str
    values: tuple

    def __post_init__(self):
        if self.variant not in MODELS:
            raise ValueError(f"unknown isotherm variant {self.variant!r}")
        if len(self.values) != len(MODELS[self.variant].names):
            raise ValueError(f"{self.variant} takes {len(MODELS[self.variant].names)} parameters")
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))

    @classmethod
    def langmuir(cls, q_max, K):
        return cls("langmuir", (q_max, K))

    @classmethod
    def freundlich(cls, K_F, n):
        return cls("freundlich", (K_F, n))

    @classmethod
    def sips(cls, q_max, K, n):
        return cls("sips", (q_max, K, n))

    @property
    def names(self):
        return MODELS[self.variant].names

    def as_dict(self):
        return dict(zip(self.names, self.values))

    def __getitem__(self, name):
        return self.as_dict()[name]


def eval_isotherm(params, pressure, composition=None):
    """Adsorption (m3/t) at ``pressure`` (MPa); scalar in, scalar out."""
    P = np.asarray(pressure, dtype=float)
    if np.any(P < 0):
        raise ValueError("pressure must be >= 0")
    model = MODELS[params.variant]
    if model.compositional and composition is None:
        raise FitError(f"{params.variant} needs composition=(volatile, moisture)")
    out = model.f(np.asarray(params.values), np.atleast_1d(P).astype(float), composition)
    return float(out[0]) if P.ndim == 0 else out.reshape(P.shape)


# ---------------------------------------------------------------- solver


def huber(r, delta=HUBER_DELTA):
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r**2, delta * (a - 0.5 * delta))


def huber_weights(r, delta=HUBER_DELTA):
    a = np.abs(r)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, _TINY))


@dataclass
class LMResult:
    x: np.ndarray
    loss: float
    nfev: int
    converged: bool
    message: str


def bounded_lm(residual, jacobian, x0, lower, upper, delta=HUBER_DELTA, max_nfev=MAX_NFEV,
               ftol=1e-10, gtol=1e-8):
    """Minimize ``sum(huber(residual(x)))`` subject to ``lower <= x <= upper``.

    Levenberg-Marquardt on the IRLS-reweighted residuals, with each trial step
    projected back into the box. A step is accepted only when it lowers the
    Huber objective.
    """
    lower, upper = np.asarray(lower, float), np.asarray(upper, float)
    x = np.clip(np.asarray(x0, dtype=float), lower, upper)
    r = residual(x)
    nfev = 1
    loss = float(np.sum(huber(r, delta)))
    mu = 1e-3
    converged, message = False, "max_nfev"

    while nfev < max_nfev:
        J = jacobian(x)
        w = huber_weights(r, delta)
        g = J.T @ (w * r)
        # projected gradient: drop components pushing against an active bound
        pg = g.copy()
        pg[(x <= lower) & (g > 0)] = 0.0
        pg[(x >= upper) & (g < 0)] = 0.0
        if np.linalg.norm(pg) < gtol or loss == 0.0:
            converged, message = True, "gtol"
            break
        A = J.T @ (J * w[:, None])
        diag = np.maximum(np.diag(A), 1e-12)
        improved = False
        while nfev < max_nfev:
            try:
                step = np.linalg.solve(A + mu * np.diag(diag), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            x_new = np.clip(x + step, lower, upper)
            if np.array_equal(x_new, x):
                break
            r_new = residual(x_new)
            nfev += 1
            loss_new = float(np.sum(huber(r_new, delta)))
            if np.isfinite(loss_new) and loss_new < loss:
                improved = True
                break
            mu *= 10
            if mu > 1e16:
                break
        if not improved:
            # no descent possible along any damped projected step
            converged, message = True, "stalled"
            break
        rel = (loss - loss_new) / max(loss, _TINY)
        x, r, loss = x_new, r_new, loss_new
        mu = max(mu / 10, 1e-12)
        if rel < ftol:
            converged, message = True, "ftol"
            break
    return LMResult(x, loss, nfev, converged, message)


# ---------------------------------------------------------------- fitting


@dataclass
class FitResult:
    params: IsothermParams
    r2: float
    rmse: float
    mae: float
    n_evaluations: int
    converged: bool
    residuals: np.ndarray
    loss: float = 0.0
    at_bound: tuple = field(default_factory=tuple)

    def to_dict(self):
        return {
            "variant": self.params.variant,
            "params": self.params.as_dict(),
            "r2": self.r2,
            "rmse": self.rmse,
            "mae": self.mae,
            "n_evaluations": self.n_evaluations,
            "converged": self.converged,
            "loss": self.loss,
            "at_bound": list(self.at_bound),
        }

    @classmethod
    def from_dict(cls, d):
        p = IsothermParams(d["variant"], tuple(d["params"].values()))
        return cls(p, d["r2"], d["rmse"], d["mae"], d["n_evaluations"], d["converged"],
                   np.zeros(0), d.get("loss", 0.0), tuple(d.get("at_bound", ())))

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)


def _initial_guess(variant, P, q):
    qmax = max(1.2 * float(np.max(q)), 1e-3)
    pmid = float(np.median(P[P > 0])) if np.any(P > 0) else 1.0
    K = 1.0 / max(pmid, 1e-3)
    if variant == "langmuir":
        return np.array([qmax, K])
    if variant == "sips":
        return np.array([qmax, K, 1.0])
    if variant == "freundlich":
        pos = (P > 0) & (q > 0)
        if pos.sum() >= 2:
            slope, icpt = np.polyfit(np.log(P[pos]), np.log(q[pos]), 1)
            n = 1.0 / slope if slope > 0 else 1.0
            return np.array([np.exp(icpt), n])
        return np.array([max(float(np.mean(q)), 1e-3), 1.0])
    if variant == "comp_langmuir":
        return np.array([qmax, K, 0.0, 0.0])
    return np.array([qmax, K, 1.0, 0.0, 0.0])


def _metrics(q, pred):
    res = q - pred
    ss_tot = float(np.sum((q - q.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss_tot if ss_tot > 0 else float("nan")
    return r2, float(np.sqrt(np.mean(res**2))), float(np.mean(np.abs(res))), res


def fit_isotherm(variant, pressure, adsorption, composition=None, init=None, n_starts=5, seed=0,
                 delta=HUBER_DELTA, max_nfev=MAX_NFEV):
    """Robust bounded fit of one isotherm family.

    Without ``init``, ``n_starts`` deterministic starts are tried (the
    heuristic guess and jittered copies within +-50%) and the lowest final
    Huber loss wins.
    """
    model = MODELS[variant]
    P = np.asarray(pressure, dtype=float)
    q = np.asarray(adsorption, dtype=float)
    if model.compositional:
        if composition is None:
            raise FitError(f"{variant} needs composition=(volatile, moisture)")
        composition = tuple(np.asarray(c, float) for c in composition)
    k = len(model.names)
    if len(P) < k + 1:
        raise FitError(f"{variant} needs at least {k + 1} points, got {len(P)}")
    if np.ptp(P) == 0:
        raise FitError("all pressures are equal")
    lo = np.array([b[0] for b in model.bounds])
    hi = np.array([b[1] for b in model.bounds])

    def resid(theta):
        return model.f(theta, P, composition) - q

    def jac(theta):
        return model.jac(theta, P, composition)

    if init is not None:
        starts = [np.asarray(init.values if isinstance(init, IsothermParams) else init, float)]
    else:
        base = _initial_guess(variant, P, q)
        rng = np.random.default_rng(seed)
        starts = [base] + [base * (1 + rng.uniform(-0.5, 0.5, size=k)) for _ in range(n_starts - 1)]
        # jitter may flip the sign of zero-centred coefficients; keep them tame
        starts = [np.clip(s, lo, hi) for s in starts]

    best = None
    for s in starts:
        res = bounded_lm(resid, jac, s, lo, hi, delta=delta, max_nfev=max_nfev)
        if best is None or res.loss < best.loss:
            best = res
    pred = model.f(best.x, P, composition)
    r2, rmse, mae, residuals = _metrics(q, pred)
    at_bound = tuple(n for n, v, a, b in zip(model.names, best.x, lo, hi) if v <= a or v >= b)
    if at_bound:
        log.info("%s fit hit bound(s): %s", variant, ", ".join(at_bound))
    return FitResult(IsothermParams(variant, tuple(best.x)), r2, rmse, mae, best.nfev,
                     best.converged, residuals, best.loss, at_bound)


def fit_stratified(pressure, adsorption, volatile, edges=(15.0, 30.0), variant="langmuir", **kw):
    """Per-rank fits. Strata: high ``[0, e0)``, medium ``[e0, e1)``, low ``[e1, inf)``.

    Returns ``{label: FitResult or None}``; ``None`` marks a stratum skipped for
    lack of points.
    """
    P = np.asarray(pressure, float)
    q = np.asarray(adsorption, float)
    v = np.asarray(volatile, float)
    idx = np.digitize(v, edges, right=False)
    k = len(MODELS[variant].names)
    out = {}
    for i, label in enumerate(("high", "medium", "low")):
        m = idx == i
        if m.sum() < k + 1 or np.ptp(P[m]) == 0:
            log.info("stratum %s skipped (%d points)", label, int(m.sum()))
            out[label] = None
            continue
        out[label] = fit_isotherm(variant, P[m], q[m], **kw)
    return out


# ---------------------------------------------------------------- ensemble


@dataclass
class EnsemblePrediction:
    mean: np.ndarray
    structural_variance: np.ndarray


def ensemble_predict(fits, pressure):
    """Average of the Langmuir, Freundlich and Sips predictions and their
    population variance."""
    names = ("langmuir", "freundlich", "sips")
    missing = [n for n in names if n not in fits]
    if missing:
        raise FitError(f"ensemble needs fits for {', '.join(missing)}")
    bad = [n for n in names if not fits[n].converged]
    if bad:
        raise FitError(f"non-converged fit(s): {', '.join(bad)}")
    preds = np.stack([np.atleast_1d(eval_isotherm(fits[n].params, pressure)) for n in names])
    return EnsemblePrediction(preds.mean(axis=0), preds.var(axis=0))
