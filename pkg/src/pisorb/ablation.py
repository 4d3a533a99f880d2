"""Ablation harness: transfer vs random baselines vs deep ensembles, with
bootstrap paired t-tests, Cohen's d and a Bonferroni gate."""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .dataset import cohens_d
from .isotherm import fit_isotherm
from .network import init_network
from .trainer import TrainingAborted, run_curriculum
from .transfer import init_physics_head_from_sips, transfer_weights

log = logging.getLogger(__name__)

ALPHA = 0.05
N_COMPARISONS = 4
ALPHA_CORRECTED = ALPHA / N_COMPARISONS  # 0.0125

__all__ = [
    "ALPHA_CORRECTED",
    "AblationReport",
    "VariantSpec",
    "bootstrap_paired_ttest",
    "cohens_d",
    "evaluate_metrics",
    "is_significant",
    "run_ablation",
    "train_variant",
]


def n_workers():
    """Worker cap from ``PISORB_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("PISORB_THREADS", "1")))
    except ValueError:
        return 1


def evaluate_metrics(pred, target, back_transform=True):
    """R^2, RMSE, MAE and MaxAE in log1p space (plus original units)."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError("predictions and targets must be aligned and non-empty")

    def block(p, t):
        err = t - p
        ss_tot = float(np.sum((t - t.mean()) ** 2))
        return {
            "r2": 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0 else float("nan"),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "mae": float(np.mean(np.abs(err))),
            "max_ae": float(np.max(np.abs(err))),
        }

    out = block(pred, target)
    if back_transform:
        out["original"] = block(np.expm1(pred), np.expm1(target))
    return out


def bootstrap_paired_ttest(errors_a, errors_b, n_boot=100, seed=0):
    """Paired t on squared-error differences, averaged over bootstrap resamples.

    Each resample draws paired indices with replacement and computes the
    paired t statistic of ``a^2 - b^2``. The reported t is the mean of the
    resampled statistics; p is two-sided from Student's t with ``n - 1``
    degrees of freedom at that mean. Negative t means ``a`` has the smaller
    errors.
    """
    a = np.asarray(errors_a, dtype=float)
    b = np.asarray(errors_b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("error vectors differ in length")
    n = len(a)
    if n < 10:
        raise ValueError("need at least 10 paired errors")
    d = a**2 - b**2
    rng = np.random.default_rng(seed)
    ts = np.empty(n_boot)
    for i in range(n_boot):
        s = d[rng.integers(0, n, size=n)]
        sd = s.std(ddof=1)
        if sd == 0:
            ts[i] = 0.0 if s.mean() == 0 else math.copysign(1e12, s.mean())
        else:
            ts[i] = s.mean() / (sd / math.sqrt(n))
    t = float(ts.mean())
    p = float(2 * stats.t.sf(abs(t), df=n - 1))
    return t, p


def is_significant(p, alpha=ALPHA_CORRECTED):
    return p < alpha


# ---------------------------------------------------------------- variants


@dataclass(frozen=True)
class VariantSpec:
    tag: str  # transfer | random_random | random_classical | ensemble_standard | ensemble_diverse | ensemble_weighted
    k: int = 1
    top_m: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.tag.startswith("ensemble"):
            if self.k < 2:
                raise ValueError("ensembles need k >= 2")
            if self.tag == "ensemble_weighted" and not 1 <= (self.top_m or self.k // 2) <= self.k:
                raise ValueError("top_m must lie in [1, k]")

    @property
    def is_ensemble(self):
        return self.tag.startswith("ensemble")


@dataclass
class VariantResult:
    tag: str
    test_pred: np.ndarray = None
    metrics: dict = field(default_factory=dict)
    convergence_epoch: int = None
    epochs_to_r2_90: int = None
    val_losses: list = field(default_factory=list)
    member_spread: float = 0.0
    complete: bool = True
    reports: list = field(default_factory=list)
    networks: list = field(default_factory=list)


def _no_transfer(phases):
    return [replace(p, lambda_reg=0.0) for p in phases]


def diverse_member(cfg, phases, rng):
    """Jittered width / dropout / learning-rate copy of a base setup."""
    scale = rng.uniform(0.75, 2.5)
    widths = tuple(max(2, int(round(w * scale))) for w in cfg.hidden_widths)
    lr_mult = rng.uniform(0.5, 2.0)
    c = replace(cfg, hidden_widths=widths, dropout_p=float(rng.uniform(0.05, 0.25)))
    return c, [replace(p, base_lr=p.base_lr * lr_mult) for p in phases]


def train_variant(tag, cfg, phases, train, val, seed=0, source=None, sips_fit=None, **train_kw):
    """Build the starting network for one single-model variant and train it.

    Returns ``(best_network, CurriculumReport)``.
    """
    cfg = replace(cfg, seed=seed)
    anchor = fisher = None
    if tag == "transfer":
        if source is None:
            raise ValueError("the transfer variant needs a source model")
        net, _, fisher = transfer_weights(cfg, source)
        if fisher is None:
            raise ValueError("source model carries no Fisher diagonal")
        # the copied encoder tensors are the source optimum
        anchor = {k: net.params[k].copy() for k in fisher}
    elif tag in ("random_random", "random_classical"):
        net = init_network(cfg)
        phases = _no_transfer(phases)
    else:
        raise ValueError(f"unknown single-model variant {tag!r}")
    if tag in ("transfer", "random_classical"):
        if sips_fit is None:
            raise ValueError(f"{tag} needs a classical Sips fit for the physics head")
        net = init_physics_head_from_sips(net, sips_fit)
    return run_curriculum(net, train, val, phases, anchor, fisher, seed=seed, **train_kw)


def _map(fn, items):
    workers = n_workers()
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(workers) as ex:
        return list(ex.map(fn, items))


def aggregate_members(preds, val_losses, top_m=None):
    """Combine member predictions ``(k, n)`` into ``(prediction, spread)``.

    Plain averaging when ``top_m`` is None; otherwise the ``top_m`` members
    with the lowest validation loss, weighted by inverse validation loss.
    Spread is the mean over samples of the member SD (all members).
    """
    preds = np.asarray(preds, dtype=float)
    # work on deviations from one member so identical members are reproduced exactly
    ref = preds[0]
    dev = preds - ref
    spread = member_spread(preds)
    if top_m is None:
        return ref + dev.mean(axis=0), spread
    vl = np.asarray(val_losses, dtype=float)
    keep = np.argsort(vl, kind="stable")[:top_m]
    w = 1.0 / np.maximum(vl[keep], 1e-12)
    return ref + (w[:, None] * dev[keep]).sum(axis=0) / w.sum(), spread


def member_spread(preds):
    """Mean over samples of the SD across members (exactly 0 for identical members)."""
    preds = np.asarray(preds, dtype=float)
    return float((preds - preds[0]).std(axis=0).mean())


def run_variant(spec, cfg, phases, train, val, test, source=None, sips_fit=None, **train_kw):
    res = VariantResult(spec.tag)
    if not spec.is_ensemble:
        try:
            net, rep = train_variant(spec.tag, cfg, phases, train, val, spec.seed, source, sips_fit, **train_kw)
        except TrainingAborted as exc:
            log.warning("variant %s aborted: %s", spec.tag, exc)
            res.complete = False
            if exc.best is None:
                return res
            net, rep = exc.best, exc.report
        res.networks, res.reports = [net], [rep]
        res.test_pred = net.predict(test.X)
        res.convergence_epoch = rep.convergence_epoch()
        res.epochs_to_r2_90 = rep.epochs_to_r2(0.90)
        res.val_losses = [rep.best_val_loss]
    else:
        rng = np.random.default_rng([spec.seed, 7919])
        members = []
        for m in range(spec.k):
            if spec.tag == "ensemble_standard":
                members.append((cfg, phases))
            else:
                members.append(diverse_member(cfg, phases, rng))

        def train_member(i):
            c, ph = members[i]
            try:
                return train_variant("random_random", c, ph, train, val, spec.seed + i, **train_kw)
            except TrainingAborted as exc:
                log.warning("ensemble member %d aborted: %s", i, exc)
                return None

        out = _map(train_member, range(spec.k))
        done = [o for o in out if o is not None]
        res.complete = len(done) == spec.k
        if not done:
            return res
        preds = np.stack([net.predict(test.X) for net, _ in done])
        top = (spec.top_m or max(1, spec.k // 2)) if spec.tag == "ensemble_weighted" else None
        res.test_pred, res.member_spread = aggregate_members(preds, [rep.best_val_loss for _, rep in done], top)
        res.networks = [n for n, _ in done]
        res.reports = [r for _, r in done]
        res.val_losses = [r.best_val_loss for r in res.reports]
        res.convergence_epoch = int(np.median([r.convergence_epoch() or 0 for r in res.reports]))
    res.metrics = evaluate_metrics(res.test_pred, test.y)
    return res


@dataclass
class AblationReport:
    variants: dict
    comparisons: list
    alpha: float = ALPHA_CORRECTED

    def to_dict(self):
        return {
            "alpha_corrected": self.alpha,
            "variants": {
                tag: {
                    "metrics": r.metrics,
                    "convergence_epoch": r.convergence_epoch,
                    "epochs_to_r2_90": r.epochs_to_r2_90,
                    "val_losses": r.val_losses,
                    "member_spread": r.member_spread,
                    "complete": r.complete,
                }
                for tag, r in self.variants.items()
            },
            "comparisons": self.comparisons,
        }


def compare(a, b, target, seed=0, n_boot=100):
    ea = np.abs(np.asarray(target) - a.test_pred)
    eb = np.abs(np.asarray(target) - b.test_pred)
    t, p = bootstrap_paired_ttest(ea, eb, n_boot=n_boot, seed=seed)
    d = cohens_d(ea, eb)
    return {"a": a.tag, "b": b.tag, "t": t, "p": p, "cohens_d": d, "significant": is_significant(p),
            "large_effect": abs(d) >= 0.8}


def run_ablation(variants, cfg, phases, train, val, test, source=None, sips_fit=None, seed=0, **train_kw):
    """Train every variant on identical data/optimizer/budget and compare.

    ``sips_fit`` defaults to a global Sips fit on the training rows.
    """
    if sips_fit is None and any(v.tag in ("transfer", "random_classical") for v in variants):
        sips_fit = fit_isotherm("sips", train.pressure, np.expm1(train.y))
    results = {}
    for spec in variants:
        res = run_variant(spec, cfg, phases, train, val, test, source, sips_fit, **train_kw)
        results[spec.tag] = res
    done = {t: r for t, r in results.items() if r.test_pred is not None}
    pairs = []
    order = list(done)
    if "transfer" in done:
        pairs += [("transfer", t) for t in order if t != "transfer"]
    if "random_classical" in done and "random_random" in done:
        pairs.append(("random_classical", "random_random"))
    comparisons = [compare(done[a], done[b], test.y, seed=seed) for a, b in pairs]
    return AblationReport(results, comparisons)


def ensemble_spread(cfg, phases, train, val, test, k=3, seed=0, lambda_p=None, **train_kw):
    """Mean per-sample SD of member test predictions for a random-init ensemble.

    ``lambda_p`` (if given) replaces the physics weight in every phase.
    Member ``i`` uses seed ``seed + i`` so two calls differ only in the
    physics weight.
    """
    ph = _no_transfer(phases)
    if lambda_p is not None:
        ph = [replace(p, lambda_p=float(lambda_p)) for p in ph]
    preds = []
    for i in range(k):
        net, _ = run_curriculum(init_network(replace(cfg, seed=seed + i)), train, val, ph, seed=seed + i, **train_kw)
        preds.append(net.predict(test.X))
    return member_spread(np.stack(preds))


# ---------------------------------------------------------------- benchmark


def make_source_model(source_ds, cfg, epochs=150, seed=0, lr=1e-3):
    """Train a source network on ``source_ds`` and attach its Fisher diagonal.

    Returns the ``(network, metadata, fisher)`` triple accepted by
    :func:`pisorb.transfer.transfer_weights`.
    """
    from .dataset import group_split
    from .loss import compute_fisher_diag
    from .network import output_gradients
    from .trainer import PhaseConfig, holdout_groups, prepare_split
    from .transfer import encoder_names

    split = group_split(source_ds, 0.2, seed=seed)
    train, _ = prepare_split(source_ds, split)
    fit, val = holdout_groups(train, 0.1, seed=seed)
    phase = PhaseConfig("full", lr, epochs, 0.0, 0.2, 1.0, "plateau")
    net, rep = run_curriculum(init_network(replace(cfg, seed=seed)), fit, val, [phase], seed=seed, r2_target=None)
    fisher = compute_fisher_diag(output_gradients(net, fit.X, encoder_names(cfg, include_buffers=False)))
    meta = {"tag": "synthetic-source", "seed": seed, "epochs": len(rep.epochs), "best_val_loss": rep.best_val_loss}
    return net, meta, fisher


@dataclass
class BenchmarkSeed:
    seed: int
    rmse: dict
    epochs_to_r2_90: dict

    @property
    def rmse_win(self):
        return self.rmse["transfer"] < self.rmse["random_random"]

    @property
    def speed_win(self):
        a, b = self.epochs_to_r2_90["transfer"], self.epochs_to_r2_90["random_random"]
        if a is None:
            return False
        return b is None or a <= 0.8 * b


def transfer_benchmark(source, cfg, seeds=range(10), n_experiments=40, target_gas=None, epochs=(500, 400, 300)):
    """Transfer vs random-random on fresh small target datasets, one per seed."""
    from .dataset import group_split
    from .synthetic import METHANE, scaled_gas, synthesize
    from .trainer import default_phases, holdout_groups, prepare_split

    gas = target_gas or scaled_gas(METHANE, 1.1)
    out = []
    for s in seeds:
        ds = synthesize(n_experiments, 9, seed=200 + s, gas=gas)
        train, test = prepare_split(ds, group_split(ds, 0.25, seed=s))
        fit, val = holdout_groups(train, 0.15, seed=s)
        sips = fit_isotherm("sips", fit.pressure, np.expm1(fit.y))
        rmse, e90 = {}, {}
        for tag in ("transfer", "random_random"):
            net, rep = train_variant(tag, cfg, default_phases(epochs), fit, val, seed=s, source=source, sips_fit=sips)
            rmse[tag] = evaluate_metrics(net.predict(test.X), test.y)["rmse"]
            e90[tag] = rep.epochs_to_r2(0.90)
        out.append(BenchmarkSeed(int(s), rmse, e90))
    return out
