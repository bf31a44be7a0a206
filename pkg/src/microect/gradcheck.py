"""Finite-difference verification of every differentiable op and a small network."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import losses
from .network import BlockSpec, NetworkConfig, ReconstructionNet, TrainConfig, _compound

STEP = 1e-5
THRESHOLD = 1e-4


def _t(rng, shape, low=-1.0, high=1.0):
    return ad.Tensor(rng.uniform(low, high, shape), requires_grad=True)


def tiny_config() -> NetworkConfig:
    """Two-block network: 6 inputs -> (3, 5) -> (6, 10)."""
    return NetworkConfig(
        m=2, n=3, out_size=(6, 10),
        blocks=(BlockSpec(4, (3, 5), (1, 1), (0, 0), (0, 0)),
                BlockSpec(1, (3, 3), (2, 2), (1, 1), (1, 1), batch_norm=False)),
    )


def layer_checks(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}
    proj = rng.standard_normal

    def scalarize(fn, shape):
        w = proj(shape)
        return lambda: ad.tsum(ad.mul(fn(), ad.Tensor(w)))

    x = _t(rng, (2, 3, 4, 5))
    w = _t(rng, (3, 2, 3, 3))
    b = _t(rng, (2,))
    f = lambda: ad.conv_transpose2d(x, w, b, 2, 1, 1)
    out["conv_transpose2d"] = ad.grad_check(scalarize(f, f().shape), [x, w, b], STEP)

    x1 = _t(rng, (2, 100, 1, 1))
    w1 = _t(rng, (100, 3, 7, 13), -0.1, 0.1)
    b1 = _t(rng, (3,))
    f = lambda: ad.conv_transpose2d(x1, w1, b1, 1, 0, 0)
    out["conv_transpose2d[7x13]"] = ad.grad_check(scalarize(f, f().shape), [x1, w1, b1], STEP)

    x = _t(rng, (2, 4, 3, 5))
    w = _t(rng, (3, 4))
    b = _t(rng, (3,))
    f = lambda: ad.conv2d_1x1(x, w, b)
    out["conv2d_1x1"] = ad.grad_check(scalarize(f, f().shape), [x, w, b], STEP)

    x = _t(rng, (3, 2, 4, 5))
    g = _t(rng, (2,), 0.5, 1.5)
    be = _t(rng, (2,))
    state = ad.BatchNormState.fresh(2)
    f = lambda: ad.batch_norm2d(x, g, be, state, train=True)
    out["batch_norm2d[train]"] = ad.grad_check(scalarize(f, f().shape), [x, g, be], STEP)
    f = lambda: ad.batch_norm2d(x, g, be, state, train=False)
    out["batch_norm2d[eval]"] = ad.grad_check(scalarize(f, f().shape), [x, g, be], STEP)

    x = _t(rng, (2, 3, 4, 5))
    f = lambda: ad.relu(x)
    out["relu"] = ad.grad_check(scalarize(f, f().shape), [x], STEP)
    f = lambda: ad.sigmoid(x)
    out["sigmoid"] = ad.grad_check(scalarize(f, f().shape), [x], STEP)
    f = lambda: ad.nearest_upsample(x, 7, 13)
    out["nearest_upsample"] = ad.grad_check(scalarize(f, f().shape), [x], STEP)
    y = _t(rng, (2, 3, 4, 5))
    f = lambda: ad.add(x, y)
    out["add"] = ad.grad_check(scalarize(f, f().shape), [x, y], STEP)

    p = _t(rng, (2, 1, 6, 10), 0.05, 0.95)
    tgt = rng.uniform(0, 1, p.shape)
    out["smooth_l1"] = ad.grad_check(lambda: losses.smooth_l1(p, tgt), [p], STEP)
    out["focal"] = ad.grad_check(lambda: losses.focal(p, tgt), [p], STEP)
    out["dice"] = ad.grad_check(lambda: losses.dice(p, tgt), [p], STEP)
    raw = _t(rng, (3,))
    out["compound"] = ad.grad_check(lambda: losses.compound(p, tgt, raw), [p, raw], STEP)
    return out


def network_check(seed: int = 0) -> float:
    """End-to-end check of the two-block network in float64, train mode,
    including the raw loss-weight parameters."""
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    net = ReconstructionNet(cfg, seed=seed, dtype="float64")
    net.params["loss.raw_weights"].data[:] = rng.uniform(-0.5, 0.5, 3)
    x = ad.Tensor(rng.uniform(0, 1, (4, cfg.in_channels, 1, 1)))
    target = (rng.uniform(0, 1, (4, 1) + cfg.out_size) > 0.6).astype(np.float64)
    tc = TrainConfig()

    def fn():
        return _compound(net, net.forward(x, train=True), target, tc)

    return ad.grad_check(fn, list(net.params.values()), STEP, samples=20, seed=seed)


def run_suite(seed: int = 0) -> dict[str, float]:
    results = layer_checks(seed)
    results["network[2 blocks]"] = network_check(seed)
    return results
