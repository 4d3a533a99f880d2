"""Shared test fixtures that are plain functions (importable from tests)."""

import numpy as np

from pisorb.loss import LossWeights, compute_fisher_diag
from pisorb.network import NetworkConfig, gradients, init_network, output_gradients
from pisorb.synthetic import synthesize
from pisorb.trainer import TrainData, batch_loss
from pisorb.transfer import encoder_names

TINY = NetworkConfig(hidden_widths=(8, 8), projection_dim=6, dropout_p=0.1, seed=3)
# three blocks so the EWC anchor (blocks 2..n) covers more than one block
TINY3 = NetworkConfig(hidden_widths=(8, 8, 6), projection_dim=6, dropout_p=0.1, seed=3)


def tiny_data(n_experiments=4, points=4, seed=0):
    return TrainData.from_dataset(synthesize(n_experiments, points, seed=seed))


def composite_problem(cfg=TINY3, seed=0):
    """A tiny network, batch and weights for which every loss term is active.

    Returns ``(net, loss_fn, breakdown)``; ``breakdown`` holds the four
    physics components at the current parameters.
    """
    data = tiny_data(seed=seed)
    idx = np.arange(len(data))
    for s in range(200):
        net = init_network(NetworkConfig(**{**cfg.to_dict(), "seed": s}))
        # push part of the batch below zero uptake and tilt K against temperature
        net.params["head_mean.bias"][:] = -0.05
        rng = np.random.default_rng(s)
        net.params["head_sips.weight"] = rng.normal(0, 1e-3, net.params["head_sips.weight"].shape)
        names = encoder_names(cfg, include_buffers=False)
        fisher = compute_fisher_diag(output_gradients(net, data.X[:4], names))
        anchor = {n: net.params[n] + rng.normal(0, 0.05, net.params[n].shape) for n in names}
        weights = LossWeights(lambda_p=0.7, lambda_reg=3.0)
        fn = batch_loss(net, data, idx, weights, anchor, fisher, seed=[s, 1])
        from pisorb.loss import physics_loss  # noqa: PLC0415
        gradients(net, fn)
        g = fn.graph

        def probe(p, g=g, net=net):
            from pisorb.network import Mode, build_graph  # noqa: PLC0415
            return build_graph(net, data.scaled_at_pressure(idx, p), Mode.TRAIN, bn_stats=g.bn_stats,
                               masks=g.masks).mean

        parts = physics_loss(g, data.pressure, data.temperature, probe).values()
        if min(parts["sips"], parts["bounds"], parts["monotonicity"], parts["vant_hoff"]) > 0:
            return net, fn, parts
    raise AssertionError("no seed activates every loss term")


def finite_difference_check(net, loss_fn, n_coords=50, h=1e-4, seed=0):
    """Max relative error between analytic and central-difference gradients
    over ``n_coords`` random trainable coordinates.

    Uses the fourth-order five-point central stencil so truncation error
    stays below roundoff at ``h = 1e-4``.
    """
    _, grads = gradients(net, loss_fn)
    rng = np.random.default_rng(seed)
    names = net.trainable_names
    sizes = np.array([net.params[n].size for n in names])
    flat_ix = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for f in flat_ix:
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        name, j = names[k], int(f - offsets[k])
        base = net.params[name].copy()
        vals = []
        for step in (2 * h, h, -h, -2 * h):
            net.params[name] = base.copy()
            net.params[name].flat[j] += step
            vals.append(gradients(net, loss_fn)[0])
        net.params[name] = base
        num = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12 * h)
        ana = float(grads[name].flat[j])
        scale = max(abs(num), abs(ana), 1e-6)
        worst = max(worst, abs(num - ana) / scale)
    return worst
