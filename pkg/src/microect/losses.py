"""Pixel, distribution and region losses and their learnable-weight combination.

All losses accept soft targets in [0, 1].  Inputs may be a single image or a
batch ``(N, C, H, W)``; Smooth L1 and focal average over every pixel, Dice is
computed per sample and averaged over the batch.
"""
from __future__ import annotations

import numpy as np

from .autodiff import ShapeError, Tensor, _result, add, index, mul, softplus

TERMS = ("smoothl1", "focal", "dice")
SOFTPLUS_ONE = float(np.log(np.e - 1.0))  # softplus(SOFTPLUS_ONE) == 1


def _check(pred: Tensor, target) -> np.ndarray:
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if y.shape != pred.shape:
        raise ShapeError(f"prediction {pred.shape} and target {y.shape} differ")
    return y.astype(pred.dtype, copy=False)


def smooth_l1(pred: Tensor, target, beta: float = 0.1) -> Tensor:
    y = _check(pred, target)
    d = pred.data - y
    ad = np.abs(d)
    quad = ad < beta
    per = np.where(quad, 0.5 * d * d / beta, ad - 0.5 * beta)
    n = d.size

    def _backward(g):
        return (g * np.where(quad, d / beta, np.sign(d)) / n,)

    return _result(np.asarray(per.mean()), [pred], _backward, "smooth_l1")


def focal(pred: Tensor, target, gamma: float = 2.0, alpha: float = 0.75,
          clamp: float = 1e-7) -> Tensor:
    y = _check(pred, target)
    p = np.clip(pred.data, clamp, 1.0 - clamp)
    inside = (pred.data > clamp) & (pred.data < 1.0 - clamp)
    logp, log1p = np.log(p), np.log1p(-p)
    q = 1.0 - p
    pos = alpha * y * q ** gamma * logp
    neg = (1.0 - alpha) * (1.0 - y) * p ** gamma * log1p
    n = p.size

    def _backward(g):
        dpos = alpha * y * (-gamma * q ** (gamma - 1) * logp + q ** gamma / p) if gamma else \
            alpha * y / p
        dneg = (1.0 - alpha) * (1.0 - y) * (
            (gamma * p ** (gamma - 1) * log1p if gamma else 0.0) - p ** gamma / q)
        return (g * -(dpos + dneg) * inside / n,)

    return _result(np.asarray(-(pos + neg).mean()), [pred], _backward, "focal")


def dice(pred: Tensor, target, smooth: float = 1.0) -> Tensor:
    y = _check(pred, target)
    p = pred.data
    batched = p.ndim == 4
    axes = tuple(range(1, p.ndim)) if batched else None
    inter = (p * y).sum(axis=axes)
    denom = (p * p).sum(axis=axes) + (y * y).sum(axis=axes) + smooth
    num = 2.0 * inter + smooth
    loss = 1.0 - num / denom
    nb = p.shape[0] if batched else 1

    def _backward(g):
        if batched:
            shape = (-1,) + (1,) * (p.ndim - 1)
            dn, dd = num.reshape(shape), denom.reshape(shape)
        else:
            dn, dd = num, denom
        grad = -(2.0 * y * dd - dn * 2.0 * p) / (dd * dd)
        return (g * grad / nb,)

    return _result(np.asarray(np.mean(loss)), [pred], _backward, "dice")


def loss_weights(raw: Tensor) -> np.ndarray:
    """Effective (positive) weights from the raw parameters."""
    return np.logaddexp(0, raw.data)


def compound(pred: Tensor, target, raw_weights: Tensor, terms=TERMS,
             beta: float = 0.1, gamma: float = 2.0, alpha: float = 0.75,
             smooth: float = 1.0) -> Tensor:
    """``sum_k softplus(a_k) * L_k`` over the enabled terms.

    ``raw_weights`` holds one raw parameter per entry of :data:`TERMS`; a
    disabled term contributes nothing and its parameter gets no gradient.
    """
    unknown = set(terms) - set(TERMS)
    if unknown or not terms:
        raise ValueError(f"terms must be a non-empty subset of {TERMS}, got {terms}")
    lam = softplus(raw_weights)
    parts = {
        "smoothl1": lambda: smooth_l1(pred, target, beta),
        "focal": lambda: focal(pred, target, gamma, alpha),
        "dice": lambda: dice(pred, target, smooth),
    }
    total = None
    for k, name in enumerate(TERMS):
        if name not in terms:
            continue
        term = mul(index(lam, k), parts[name]())
        total = term if total is None else add(total, term)
    return total
