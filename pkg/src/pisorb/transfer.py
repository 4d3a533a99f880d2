"""Selective weight transfer, freeze plans and physics-head initialization."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import SIPS_RANGES, block_prefix, init_network, is_buffer, load_model, tensor_shapes

log = logging.getLogger(__name__)

# Encoder "layers 2-5": every block after the first hidden block.
FIRST_TRANSFERRED_BLOCK = 2
HEAD_NUDGE = 1e-6


class TransferError(ValueError):
    pass


def encoder_names(cfg, include_buffers=True):
    """Tensor names of blocks 2..n (the transferred, EWC-anchored encoder)."""
    prefixes = tuple(f"{block_prefix(i)}." for i in range(FIRST_TRANSFERRED_BLOCK, cfg.n_blocks + 1))
    return [n for n in tensor_shapes(cfg) if n.startswith(prefixes) and (include_buffers or not is_buffer(n))]


@dataclass
class TransferManifest:
    source: str
    copied: list
    random: list
    fisher_attached: bool = False
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "source": self.source,
            "copied": self.copied,
            "random": self.random,
            "fisher_attached": self.fisher_attached,
            "source_metadata": self.metadata,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def transfer_weights(target_cfg, source):
    """Fresh target network with encoder blocks 2..n copied from ``source``.

    ``source`` is a model-file path or a ``(network, metadata, fisher)``
    triple. Every other tensor (projection, block 1, heads) is freshly
    initialized from ``target_cfg.seed``. Shapes are checked for every
    encoder tensor before anything is copied.

    Returns ``(network, manifest, fisher)``; ``fisher`` is the source file's
    Fisher diagonal restricted to the encoder, or None.
    """
    if isinstance(source, (str, Path)):
        src_net, meta, fisher = load_model(source)
        src_label = str(source)
    else:
        src_net, meta, fisher = source
        src_label = meta.get("tag", "<in-memory>") if meta else "<in-memory>"

    names = encoder_names(target_cfg)
    target_shapes = tensor_shapes(target_cfg)
    for n in names:
        if n not in src_net.params:
            raise TransferError(f"source model has no tensor {n!r}")
        if src_net.params[n].shape != target_shapes[n]:
            raise TransferError(
                f"encoder tensor {n!r}: source shape {src_net.params[n].shape} != target {target_shapes[n]}"
            )

    net = init_network(target_cfg)
    for n in names:
        net.params[n] = src_net.params[n].copy()
    random = [n for n in net.params if n not in set(names)]
    if fisher is not None:
        trainable = set(encoder_names(target_cfg, include_buffers=False))
        fisher = {k: v for k, v in fisher.items() if k in trainable}
    manifest = TransferManifest(src_label, list(names), random, fisher is not None, dict(meta or {}))
    return net, manifest, fisher


@dataclass(frozen=True)
class FreezePlan:
    names: frozenset

    def __contains__(self, name):
        return name in self.names

    def __iter__(self):
        return iter(sorted(self.names))

    def __len__(self):
        return len(self.names)


def build_freeze_plan(phase, cfg):
    """warmup freezes the transferred encoder; later phases train everything."""
    if phase == "warmup":
        return FreezePlan(frozenset(encoder_names(cfg, include_buffers=False)))
    if phase in ("finetune", "full"):
        return FreezePlan(frozenset())
    raise ValueError(f"unknown phase {phase!r}")


def frozen_fraction(net, plan):
    total = net.n_parameters()
    return sum(net.params[n].size for n in plan) / total if total else 0.0


def _logit(p):
    return math.log(p / (1.0 - p))


def init_physics_head_from_sips(net, fit):
    """Zero the physics-head weights and set its biases so the head emits the
    fitted Sips ``(q_max, K, n)`` exactly.

    Values on (or beyond) a range edge are moved inside by a relative 1e-6
    with a warning. Returns a new Network; ``net`` is left untouched.
    """
    if hasattr(fit, "converged"):
        if not fit.converged:
            raise TransferError("Sips fit did not converge")
        values = fit.params.as_dict()
    else:
        values = dict(fit)
    out = net.copy()
    bias = np.empty(3)
    for j, key in enumerate(("q_max", "K", "n")):
        lo, span = SIPS_RANGES[key]
        frac = (float(values[key]) - lo) / span
        if not HEAD_NUDGE <= frac <= 1 - HEAD_NUDGE:
            nudged = min(max(frac, HEAD_NUDGE), 1 - HEAD_NUDGE)
            warnings.warn(f"Sips {key}={values[key]} at its head bound; nudged inward", RuntimeWarning, stacklevel=2)
            frac = nudged
        bias[j] = _logit(frac)
    out.params["head_sips.weight"] = np.zeros_like(out.params["head_sips.weight"])
    out.params["head_sips.bias"] = bias
    return out
