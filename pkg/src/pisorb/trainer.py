"""Three-phase training curriculum and its optimization machinery."""

from __future__ import annotations

import itertools
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import dataset as dsmod
from .loss import LossWeights, data_nll, ewc_penalty, lambda_p_schedule, physics_loss, total_loss
from .network import Mode, build_graph, gradients, init_network, update_running_stats
from .transfer import build_freeze_plan

log = logging.getLogger(__name__)

MAX_TOTAL_EPOCHS = 1200
WEIGHT_DECAY = 1e-5
NONFINITE_ABORT = 5


class TrainingAborted(RuntimeError):
    def __init__(self, msg, best=None, report=None):
        super().__init__(msg)
        self.best = best
        self.report = report


# ---------------------------------------------------------------- data


@dataclass
class TrainData:
    """Scaled model inputs plus what the physics terms need in physical units."""

    X: np.ndarray  # scaled features
    y: np.ndarray  # log1p adsorption
    pressure: np.ndarray  # MPa
    temperature: np.ndarray  # K
    raw: np.ndarray  # unscaled engineered features
    scaler: dsmod.ScalerState
    groups: np.ndarray

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        return TrainData(self.X[idx], self.y[idx], self.pressure[idx], self.temperature[idx],
                         self.raw[idx], self.scaler, self.groups[idx])

    def scaled_at_pressure(self, idx, pressure):
        return dsmod.transform(dsmod.with_pressure(self.raw[idx], pressure), self.scaler)

    @classmethod
    def from_dataset(cls, ds, scaler=None):
        raw = dsmod.feature_matrix(ds)
        scaler = scaler or dsmod.fit_scaler(raw)
        return cls(dsmod.transform(raw, scaler), dsmod.transform_target(ds.adsorption),
                   ds.pressure.copy(), ds.temperature.copy(), raw, scaler, ds.experiment_id.copy())


def prepare_split(ds, split):
    """Train/test TrainData with the scaler fitted on training rows only."""
    train_ds = ds.subset(split.partition == "train")
    test_ds = ds.subset(split.partition == "test")
    train = TrainData.from_dataset(train_ds)
    return train, TrainData.from_dataset(test_ds, train.scaler)


def holdout_groups(data, fraction=0.1, seed=0):
    """Split a TrainData by group into (fit, validation) parts."""
    groups = list(dict.fromkeys(data.groups.tolist()))
    rng = np.random.default_rng(seed)
    n_val = min(max(int(round(fraction * len(groups))), 1), len(groups) - 1)
    val_groups = {groups[i] for i in rng.permutation(len(groups))[:n_val]}
    is_val = np.array([g in val_groups for g in data.groups])
    return data.subset(~is_val), data.subset(is_val)


# ---------------------------------------------------------------- optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    skipped: int = 0


def adamw_step(params, grads, state, lr):
    """One AdamW update in place on ``params`` for every name in ``grads``.

    Returns False (and leaves everything untouched) when a gradient is
    non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; AdamW step skipped")
        return False
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = b1 * m + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        theta = params[name] * (1.0 - lr * state.weight_decay)
        params[name] = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_grad_norm(grads, max_norm):
    """Rescale so the global L2 norm is at most ``max_norm``; returns (grads, pre-clip norm)."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without improvement."""

    def __init__(self, lr, patience=25, factor=0.5, min_lr=1e-6):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.min_lr = min_lr
        self.best = math.inf
        self.stale = 0

    def step(self, val_loss):
        if val_loss < self.best:
            self.best = val_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stale = 0
        return self.lr


class CosineRestartScheduler:
    def __init__(self, lr, period=60, min_frac=0.01):
        self.base = lr
        self.period = period
        self.eta_min = min_frac * lr
        self.lr = lr

    def at(self, epoch):
        e = epoch % self.period
        return self.eta_min + (self.base - self.eta_min) * (1 + math.cos(math.pi * e / self.period)) / 2

    def step(self, epoch):
        self.lr = self.at(epoch)
        return self.lr


def make_scheduler(phase):
    if phase.scheduler == "plateau":
        return PlateauScheduler(phase.base_lr, patience=phase.plateau_patience)
    if phase.scheduler == "cosine":
        return CosineRestartScheduler(phase.base_lr, period=phase.period)
    raise ValueError(f"unknown scheduler {phase.scheduler!r}")


# ---------------------------------------------------------------- curriculum


@dataclass(frozen=True)
class PhaseConfig:
    name: str
    base_lr: float
    max_epochs: int
    lambda_reg: float
    lambda_p: object  # float, or "adaptive" for the finetune ramp
    clip_norm: float
    scheduler: str
    period: int = 60
    plateau_patience: int = 25

    def lambda_p_at(self, t):
        if self.lambda_p == "adaptive":
            return lambda_p_schedule(t, self.name)
        return float(self.lambda_p)


def default_phases(epochs=(500, 400, 300)):
    w, f, u = epochs
    return [
        PhaseConfig("warmup", 1e-3, w, 0.0, 0.05, 0.5, "plateau"),
        PhaseConfig("finetune", 5e-4, f, 100.0, "adaptive", 0.5, "plateau"),
        PhaseConfig("full", 1e-4, u, 10.0, 0.2, 1.0, "cosine", period=60),
    ]


def phases_from_json(obj):
    return [PhaseConfig(**p) for p in obj]


@dataclass
class EpochRecord:
    phase: str
    epoch: int
    phase_epoch: int
    train_loss: float
    val_loss: float
    val_r2: float
    val_rmse: float
    lr: float
    lambda_p: float
    lambda_reg: float


@dataclass
class CurriculumReport:
    epochs: list = field(default_factory=list)
    phase_boundaries: dict = field(default_factory=dict)  # phase -> (first, last) global epoch
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stop_reason: str = "budget"
    skipped_steps: int = 0

    def epochs_to_r2(self, target):
        """First global epoch at which validation R^2 reaches ``target`` (or None)."""
        for rec in self.epochs:
            if rec.val_r2 >= target:
                return rec.epoch
        return None

    def convergence_epoch(self, frac=0.95):
        """First epoch reaching ``frac`` of the run's final validation R^2."""
        if not self.epochs:
            return None
        final = self.epochs[-1].val_r2
        return self.epochs_to_r2(frac * final) if final > 0 else None

    def summary(self):
        return {
            "phase_boundaries": self.phase_boundaries,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stop_reason": self.stop_reason,
            "n_epochs": len(self.epochs),
            "skipped_steps": self.skipped_steps,
        }

    def to_jsonl(self):
        return "\n".join(json.dumps(asdict(r)) for r in self.epochs) + "\n"


def r2_score(y, pred):
    y, pred = np.asarray(y, float), np.asarray(pred, float)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return float("nan")
    return 1.0 - float(np.sum((y - pred) ** 2)) / ss_tot


def evaluate(net, data):
    """EVAL-mode ``(loss, r2, rmse)`` where loss is the log-space MSE of the mean head."""
    pred = net.predict(data.X)
    mse = float(np.mean((data.y - pred) ** 2))
    return mse, r2_score(data.y, pred), math.sqrt(mse)


def batch_loss(net, data, idx, weights, anchor, fisher, seed, probe_delta=0.01):
    """Closure computing the composite loss of one mini-batch from leaves."""
    X = data.X[idx]
    y = data.y[idx]
    P = data.pressure[idx]
    T = data.temperature[idx]

    def loss_fn(leaves):
        g = build_graph(net, X, Mode.TRAIN, rng_seed=seed, leaves=leaves)
        loss_fn.graph = g

        def probe(p_shift):
            Xp = data.scaled_at_pressure(idx, p_shift)
            return build_graph(net, Xp, Mode.TRAIN, leaves=leaves, bn_stats=g.bn_stats, masks=g.masks).mean

        phys = physics_loss(g, P, T, probe if weights.lambda_p > 0 else None, delta=probe_delta)
        data_term = data_nll(y, g.mean, g.log_var)
        if weights.lambda_reg > 0:
            merged = {n: leaves.get(n, net.params[n]) for n in fisher}
            ewc = ewc_penalty(merged, anchor, fisher)
        else:
            ewc = 0.0
        return total_loss(data_term, phys, ewc, weights)

    return loss_fn


def run_curriculum(net, train, val, phases=None, anchor=None, fisher=None, seed=0, batch_size=128,
                   patience=100, r2_target=0.95, max_total_epochs=MAX_TOTAL_EPOCHS):
    """Train ``net`` (a copy; the argument is not modified) through ``phases``.

    Returns ``(best_network, CurriculumReport)``. The best network is the
    checkpoint with the lowest validation loss (mean-head MSE in EVAL
    mode). Patience ends the current phase; the R^2 target ends the run but
    is only checked during the last phase.
    """
    phases = list(phases or default_phases())
    if any(p.lambda_reg > 0 for p in phases) and (anchor is None or fisher is None):
        raise ValueError("a phase with lambda_reg > 0 needs an anchor and a Fisher diagonal")
    net = net.copy()
    report = CurriculumReport()
    best = net.copy()
    global_epoch = 0
    nonfinite_run = 0
    stop = False

    for pi, phase in enumerate(phases):
        if stop or global_epoch >= max_total_epochs:
            break
        plan = build_freeze_plan(phase.name, net.cfg)
        state = OptimizerState()
        sched = make_scheduler(phase)
        lr = phase.base_lr
        phase_best, stale = math.inf, 0
        first = global_epoch
        last_phase = pi == len(phases) - 1

        for t in range(phase.max_epochs):
            if global_epoch >= max_total_epochs:
                report.stop_reason = "budget"
                stop = True
                break
            if phase.scheduler == "cosine":
                lr = sched.step(t)
            weights = LossWeights(phase.lambda_p_at(t), phase.lambda_reg, t)
            rng = np.random.default_rng([seed, global_epoch])
            order = rng.permutation(len(train))
            batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
            if len(batches) > 1 and len(batches[-1]) < 2:
                batches[-2] = np.concatenate([batches[-2], batches.pop()])
            losses = []
            for bi, idx in enumerate(batches):
                fn = batch_loss(net, train, idx, weights, anchor, fisher, seed=[seed, global_epoch, bi])
                try:
                    # non-finite values are handled below; numpy's overflow warnings add nothing
                    with np.errstate(over="ignore", invalid="ignore"):
                        value, grads = gradients(net, fn, freeze=plan)
                except FloatingPointError:
                    losses.append(math.nan)
                    continue
                losses.append(value)
                if not math.isfinite(value):
                    continue
                grads = {k: g for k, g in grads.items() if k not in plan}
                grads, _ = clip_grad_norm(grads, phase.clip_norm)
                if adamw_step(net.params, grads, state, lr):
                    # running stats are buffers: they track the batch even in frozen blocks
                    update_running_stats(net, fn.graph)
            report.skipped_steps += state.skipped
            state.skipped = 0

            train_loss = float(np.mean(losses)) if losses else math.nan
            val_loss, val_r2, val_rmse = evaluate(net, val)
            report.epochs.append(EpochRecord(phase.name, global_epoch, t, train_loss, val_loss, val_r2,
                                             val_rmse, lr, weights.lambda_p, weights.lambda_reg))
            if not (math.isfinite(train_loss) and math.isfinite(val_loss)):
                nonfinite_run += 1
                if nonfinite_run >= NONFINITE_ABORT:
                    report.stop_reason = "nonfinite"
                    raise TrainingAborted(
                        f"non-finite loss for {NONFINITE_ABORT} consecutive epochs (phase {phase.name}, epoch {global_epoch})",
                        best, report)
            else:
                nonfinite_run = 0
                if val_loss < report.best_val_loss:
                    report.best_val_loss = val_loss
                    report.best_epoch = global_epoch
                    best = net.copy()
            if phase.scheduler == "plateau":
                lr = sched.step(val_loss)
            global_epoch += 1

            if val_loss < phase_best:
                phase_best, stale = val_loss, 0
            else:
                stale += 1
            if last_phase and r2_target is not None and val_r2 > r2_target:
                report.stop_reason = "r2_target"
                stop = True
                break
            if stale >= patience:
                if last_phase:
                    report.stop_reason = "patience"
                    stop = True
                break
        else:
            if last_phase:
                report.stop_reason = "budget"
        report.phase_boundaries[phase.name] = (first, global_epoch - 1)
    return best, report


# ---------------------------------------------------------------- CV search


def _apply_hparams(phases, cfg, hp):
    out = []
    for p in phases:
        changes = {}
        if "lr" in hp:
            changes["base_lr"] = p.base_lr * hp["lr"] / phases[0].base_lr
        if "lambda_p" in hp and p.name == "full":
            changes["lambda_p"] = hp["lambda_p"]
        if "lambda_reg" in hp and p.lambda_reg > 0:
            changes["lambda_reg"] = hp["lambda_reg"] if p.name == "finetune" else hp["lambda_reg"] / 10
        out.append(replace(p, **changes))
    if "dropout" in hp:
        cfg = replace(cfg, dropout_p=hp["dropout"])
    return out, cfg


@dataclass
class CVResult:
    best: dict
    table: list  # one dict per grid point: params, fold losses, mean, cov

    def to_dict(self):
        return {"best": self.best, "table": self.table}


def grid_search_cv(space, data, cfg, phases, k=5, seed=0, anchor=None, fisher=None, init=None, **train_kw):
    """Exhaustive group-k-fold search over ``space`` (``{name: [values]}``).

    Recognized names: ``lr`` (warmup rate; other phases scale along),
    ``lambda_p`` (final-phase physics weight), ``lambda_reg`` (finetune EWC
    weight; final phase gets a tenth), ``dropout``. Selection is by mean fold
    validation loss. ``init(cfg) -> Network`` builds the starting model
    (default: random initialization).
    """
    folds = dsmod.group_kfold(list(dict.fromkeys(data.groups.tolist())), k=k, seed=seed)
    keys = sorted(space)
    table = []
    for combo in itertools.product(*(space[name] for name in keys)):
        hp = dict(zip(keys, combo))
        ph, c = _apply_hparams(phases, cfg, hp)
        if anchor is None:
            ph = [replace(p, lambda_reg=0.0) for p in ph]
        fold_losses = []
        for fi, fold in enumerate(folds):
            hold = np.isin(data.groups, fold)
            start = init(c) if init else init_network(c)
            trained, _ = run_curriculum(start, data.subset(~hold), data.subset(hold), ph, anchor, fisher,
                                        seed=seed + fi, **train_kw)
            fold_losses.append(evaluate(trained, data.subset(hold))[0])
        fl = np.array(fold_losses)
        mean = float(fl.mean())
        cov = float(fl.std() / abs(mean)) if mean != 0 else math.inf
        table.append({"params": hp, "fold_losses": fl.tolist(), "mean": mean, "cov": cov, "stable": cov < 0.03})
    best = min(table, key=lambda r: r["mean"])
    return CVResult(best, table)
