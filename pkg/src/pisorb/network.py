"""Residual multi-head sorption network on top of :mod:`pisorb.autodiff`.

Layout: a 12 -> 25 linear projection, five residual blocks
(linear -> batchnorm -> swish -> dropout, plus an identity or linear skip),
and three heads read from the last block:

* ``head_mean``   -- log1p adsorption
* ``head_logvar`` -- log aleatoric variance (log1p space)
* ``head_sips``   -- three raw outputs squashed into Sips parameter ranges
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FORMAT_VERSION = 1
FULL_WIDTHS = (512, 1024, 512, 256, 128)
DESK_WIDTHS = (64, 128, 64, 32, 16)
BN_EPS = 1e-5

# Sips head squashing: value = lo + span * sigmoid(raw)
SIPS_RANGES = {"q_max": (0.0, 100.0), "K": (0.01, 9.99), "n": (0.5, 9.5)}


class Mode(enum.Enum):
    TRAIN = "train"  # batch statistics + dropout
    EVAL = "eval"  # running statistics, no dropout
    MC_DROPOUT = "mc_dropout"  # running statistics + dropout


class ModelFileError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    input_dim: int = 12
    projection_dim: int = 25
    hidden_widths: tuple = FULL_WIDTHS
    dropout_p: float = 0.1
    bn_momentum: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if min(self.hidden_widths, default=0) <= 0 or self.input_dim <= 0 or self.projection_dim <= 0:
            raise ValueError("layer widths must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")

    @property
    def n_blocks(self):
        return len(self.hidden_widths)

    def to_dict(self):
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class ForwardOutput:
    mean: np.ndarray
    log_var: np.ndarray
    q_max: np.ndarray
    K: np.ndarray
    n: np.ndarray

    @property
    def sips(self):
        return np.column_stack([self.q_max, self.K, self.n])


@dataclass
class Graph:
    """Differentiable forward outputs plus what is needed to replay the pass."""

    mean: Tensor
    log_var: Tensor
    q_max: Tensor
    K: Tensor
    n: Tensor
    bn_stats: dict = field(default_factory=dict)  # block -> (mean Tensor, var Tensor)
    masks: list = field(default_factory=list)


# ---------------------------------------------------------------- parameters


def block_prefix(i):
    """Blocks are numbered from 1."""
    return f"block{i}"


def tensor_shapes(cfg):
    shapes = {"proj.weight": (cfg.input_dim, cfg.projection_dim), "proj.bias": (cfg.projection_dim,)}
    width_in = cfg.projection_dim
    for i, w in enumerate(cfg.hidden_widths, start=1):
        b = block_prefix(i)
        shapes[f"{b}.linear.weight"] = (width_in, w)
        shapes[f"{b}.linear.bias"] = (w,)
        shapes[f"{b}.bn.weight"] = (w,)
        shapes[f"{b}.bn.bias"] = (w,)
        shapes[f"{b}.bn.running_mean"] = (w,)
        shapes[f"{b}.bn.running_var"] = (w,)
        if width_in != w:
            shapes[f"{b}.skip.weight"] = (width_in, w)
        width_in = w
    for head, k in (("head_mean", 1), ("head_logvar", 1), ("head_sips", 3)):
        shapes[f"{head}.weight"] = (width_in, k)
        shapes[f"{head}.bias"] = (k,)
    return shapes


def is_buffer(name):
    """Batchnorm running statistics carry no gradient."""
    return name.endswith("running_mean") or name.endswith("running_var")


def xavier_uniform(rng, shape, gain=1.0):
    bound = gain * np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-bound, bound, size=shape)


def _init_tensor(name, shape, rng):
    if name.endswith("running_var") or name.endswith("bn.weight"):
        return np.ones(shape)
    if name.endswith("bias") or name.endswith("running_mean"):
        return np.zeros(shape)
    gain = 0.5 if name.startswith("proj.") else 1.0
    return xavier_uniform(rng, shape, gain)


class Network:
    """Configuration plus a named parameter store (``dict`` of arrays)."""

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    def copy(self):
        return Network(self.cfg, {k: v.copy() for k, v in self.params.items()})

    @property
    def trainable_names(self):
        return [n for n in self.params if not is_buffer(n)]

    def n_parameters(self):
        return int(sum(self.params[n].size for n in self.trainable_names))

    def forward(self, X, mode=Mode.EVAL, rng_seed=None):
        g = build_graph(self, X, mode, rng_seed)
        return ForwardOutput(*(t.data.copy() for t in (g.mean, g.log_var, g.q_max, g.K, g.n)))

    def predict(self, X):
        return self.forward(X, Mode.EVAL).mean


def init_network(cfg):
    """Xavier-uniform weights (gain 0.5 on the projection), zero biases,
    identity batchnorm. Deterministic in ``cfg.seed``."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in tensor_shapes(cfg).items():
        params[name] = _init_tensor(name, shape, rng)
    return Network(cfg, params)


def init_tensors(cfg, names, seed):
    """Fresh initial values for a subset of tensors (used when transferring)."""
    rng = np.random.default_rng(seed)
    shapes = tensor_shapes(cfg)
    return {n: _init_tensor(n, shapes[n], rng) for n in shapes if n in set(names)}


# ---------------------------------------------------------------- forward


def dropout_masks(cfg, n_rows, seed):
    """Inverted-dropout masks, one ``(n_rows, width)`` array per block."""
    rng = np.random.default_rng(seed)
    keep = 1.0 - cfg.dropout_p
    return [(rng.random((n_rows, w)) < keep) / keep for w in cfg.hidden_widths]


def sips_from_raw(raw):
    """Squash three raw head outputs into (q_max, K, n) inside their bounds."""
    out = []
    for j, key in enumerate(("q_max", "K", "n")):
        lo, span = SIPS_RANGES[key]
        out.append(lo + span * ad.sigmoid(raw[:, j]))
    return out


def build_graph(net, X, mode, rng_seed=None, leaves=None, bn_stats=None, masks=None):
    """Forward pass recording a graph.

    ``leaves`` maps parameter names to Tensors that should receive gradients;
    all other parameters enter as constants. In TRAIN mode ``bn_stats`` (from
    an earlier Graph) replaces the batch statistics, and ``masks`` replaces
    freshly drawn dropout masks, so a perturbed-input replay evaluates the
    same function as the original pass.
    """
    cfg = net.cfg
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != cfg.input_dim:
        raise ValueError(f"expected a batch of shape (n, {cfg.input_dim}), got {X.shape}")
    if mode is Mode.TRAIN and X.shape[0] < 2 and bn_stats is None:
        raise ValueError("TRAIN mode needs a batch of at least 2 rows for batch statistics")
    leaves = leaves or {}

    def p(name):
        t = leaves.get(name)
        return t if t is not None else Tensor(net.params[name])

    use_dropout = mode in (Mode.TRAIN, Mode.MC_DROPOUT) and cfg.dropout_p > 0
    if use_dropout and masks is None:
        masks = dropout_masks(cfg, X.shape[0], rng_seed)
    stats_out = {}

    h = Tensor(X) @ p("proj.weight") + p("proj.bias")
    for i in range(1, cfg.n_blocks + 1):
        b = block_prefix(i)
        z = h @ p(f"{b}.linear.weight") + p(f"{b}.linear.bias")
        if mode is Mode.TRAIN:
            if bn_stats is not None:
                mu, var = bn_stats[i]
            else:
                mu = z.mean(axis=0)
                var = ((z - mu) ** 2).mean(axis=0)
            stats_out[i] = (mu, var)
        else:
            mu = Tensor(net.params[f"{b}.bn.running_mean"])
            var = Tensor(net.params[f"{b}.bn.running_var"])
        zn = (z - mu) * (var + BN_EPS) ** -0.5 * p(f"{b}.bn.weight") + p(f"{b}.bn.bias")
        a = ad.swish(zn)
        if use_dropout:
            a = a * masks[i - 1]
        skip_name = f"{b}.skip.weight"
        skip = h @ p(skip_name) if skip_name in net.params else h
        h = a + skip

    mean = (h @ p("head_mean.weight") + p("head_mean.bias")).reshape(-1)
    log_var = (h @ p("head_logvar.weight") + p("head_logvar.bias")).reshape(-1)
    raw = h @ p("head_sips.weight") + p("head_sips.bias")
    q_max, K, n = sips_from_raw(raw)
    return Graph(mean, log_var, q_max, K, n, stats_out, masks or [])


def update_running_stats(net, graph):
    """Momentum update of batchnorm running statistics from a TRAIN graph."""
    m = net.cfg.bn_momentum
    for i, (mu, var) in graph.bn_stats.items():
        b = block_prefix(i)
        n_rows = graph.mean.shape[0]
        unbiased = var.data * n_rows / max(n_rows - 1, 1)
        net.params[f"{b}.bn.running_mean"] = (1 - m) * net.params[f"{b}.bn.running_mean"] + m * mu.data
        net.params[f"{b}.bn.running_var"] = (1 - m) * net.params[f"{b}.bn.running_var"] + m * unbiased


# ---------------------------------------------------------------- gradients


def make_leaves(net, names):
    return {n: Tensor(net.params[n], requires_grad=True) for n in names}


def gradients(net, loss_fn, freeze=()):
    """Value and gradients of ``loss_fn(leaves) -> scalar Tensor``.

    Gradients cover every trainable tensor; frozen tensors get exact zeros.
    """
    frozen = set(freeze)
    live = [n for n in net.trainable_names if n not in frozen]
    leaves = make_leaves(net, live)
    loss = loss_fn(leaves)
    if not isinstance(loss, Tensor) or not loss.requires_grad:
        raise RuntimeError("loss has no recorded graph; run the forward pass through the supplied leaves")
    grads = ad.backward(loss, leaves)
    for n in net.trainable_names:
        if n in frozen:
            grads[n] = np.zeros_like(net.params[n])
    return float(loss.data), grads


def output_gradients(net, X, names):
    """Per-row gradients of the mean head (EVAL mode) w.r.t. ``names``.

    Yields one ``{name: array}`` dict per row of ``X``.
    """
    X = np.asarray(X, dtype=float)
    for row in X:
        leaves = make_leaves(net, names)
        g = build_graph(net, row[None, :], Mode.EVAL, leaves=leaves)
        yield ad.backward(g.mean.sum(), leaves)


# ---------------------------------------------------------------- model files


def save_model(net, path, metadata=None, fisher=None):
    """Write the JSON model file; ``fisher`` tensors go under ``fisher.<name>``."""
    tensors = {}
    for name, arr in net.params.items():
        tensors[name] = {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
    for name, arr in (fisher or {}).items():
        tensors[f"fisher.{name}"] = {"shape": list(arr.shape), "data": [float(v) for v in np.ravel(arr)]}
    doc = {
        "format_version": FORMAT_VERSION,
        "config": net.cfg.to_dict(),
        "metadata": dict(metadata or {}),
        "tensors": tensors,
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def load_model(path):
    """Read a model file. Returns ``(network, metadata, fisher_or_None)``."""
    doc = json.loads(Path(path).read_text())
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format_version {version!r} (expected {FORMAT_VERSION})")
    cfg = NetworkConfig.from_dict(doc["config"])
    expected = tensor_shapes(cfg)
    params, fisher = {}, {}
    for name, t in doc["tensors"].items():
        arr = np.asarray(t["data"], dtype=float).reshape(t["shape"])
        if name.startswith("fisher."):
            fisher[name[len("fisher."):]] = arr
            continue
        if name not in expected:
            raise ModelFileError(f"tensor {name!r} is not part of the configured architecture")
        if tuple(arr.shape) != expected[name]:
            raise ModelFileError(f"tensor {name!r}: shape {tuple(arr.shape)} does not match config {expected[name]}")
        params[name] = arr
    missing = [n for n in expected if n not in params]
    if missing:
        raise ModelFileError(f"model file lacks tensor {missing[0]!r}")
    ordered = {n: params[n] for n in expected}
    return Network(cfg, ordered), doc.get("metadata", {}), (fisher or None)
