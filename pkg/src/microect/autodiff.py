"""A small dense-tensor engine with reverse-mode differentiation.

Only the operations needed by the reconstruction network are provided.
Every op takes and returns :class:`Tensor` objects; when any input requires
a gradient the result remembers its parents and a closure that maps the
output gradient to input gradients.  :func:`backward` orders the recorded
graph topologically (the "tape") and runs the closures in reverse.

Layout is NCHW throughout.  Transposed-convolution weights are stored as
``(C_in, C_out, kh, kw)``; 1x1 convolution weights as ``(C_out, C_in)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit


class ShapeError(ValueError):
    pass


class DegenerateBatchError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "op", "_parents", "_backward", "saved")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward = None
        self.saved = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op})"

    def backward(self):
        backward(self)


def _result(data, parents, backward_fn, op, saved=None) -> Tensor:
    out = Tensor(data)
    out.op = op
    out.saved = saved
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def build_tape(loss: Tensor) -> list[Tensor]:
    """Nodes reachable from ``loss`` that need gradients, in topological order."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params=None):
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf.

    If ``params`` is given, their gradients are returned in order, with
    zeros for parameters the loss does not depend on.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = build_tape(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    if params is not None:
        return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    return None


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_transpose_output_size(size, kernel, stride=1, padding=0, output_padding=0):
    return (size - 1) * stride + kernel - 2 * padding + output_padding


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride=1, padding=0, output_padding=0) -> Tensor:
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError(f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    N, cin, H, W = x.shape
    wcin, cout, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"input has {cin} channels but weight expects C_in={wcin}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({cout},)")
    if not (0 <= oph < max(sh, 1) and 0 <= opw < max(sw, 1)) and (oph, opw) != (0, 0):
        raise ShapeError(f"output_padding {(oph, opw)} must be smaller than stride {(sh, sw)}")
    oh = conv_transpose_output_size(H, kh, sh, ph, oph)
    ow = conv_transpose_output_size(W, kw, sw, pw, opw)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"non-positive output size {(oh, ow)}")
    fh = max((H - 1) * sh + kh, ph + oh)
    fw = max((W - 1) * sw + kw, pw + ow)
    xd, wd = x.data, weight.data
    # cols[o, a, b, n, h, w] = sum_i W[i, o, a, b] x[n, i, h, w]
    cols = np.tensordot(wd, xd, axes=([0], [1]))
    buf = np.zeros((cout, N, fh, fw), dtype=xd.dtype)
    hs, ws = (H - 1) * sh + 1, (W - 1) * sw + 1
    for a in range(kh):
        for b in range(kw):
            buf[:, :, a:a + hs:sh, b:b + ws:sw] += cols[:, a, b]
    out = buf[:, :, ph:ph + oh, pw:pw + ow].transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g):
        gbuf = np.zeros((cout, N, fh, fw), dtype=g.dtype)
        gbuf[:, :, ph:ph + oh, pw:pw + ow] = g.transpose(1, 0, 2, 3)
        gcols = np.empty((cout, kh, kw, N, H, W), dtype=g.dtype)
        for a in range(kh):
            for b in range(kw):
                gcols[:, a, b] = gbuf[:, :, a:a + hs:sh, b:b + ws:sw]
        gx = np.tensordot(wd, gcols, axes=([1, 2, 3], [0, 1, 2])).transpose(1, 0, 2, 3) \
            if x.requires_grad else None
        gw = np.tensordot(xd, gcols, axes=([0, 2, 3], [3, 4, 5])) if weight.requires_grad else None
        grads = [None if gx is None else np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, _backward, "conv_transpose2d")


def conv2d(y: np.ndarray, weight: np.ndarray, stride=1, padding=0, out_size=None) -> np.ndarray:
    """Plain strided correlation with a transposed-convolution weight.

    Maps ``(N, C_out, OH, OW)`` back to ``(N, C_in, H, W)`` by gathering, which
    makes it the adjoint of :func:`conv_transpose2d` for matching parameters.
    Forward only; used to cross-check the scatter implementation.
    """
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    N, cout, OH, OW = y.shape
    cin, wcout, kh, kw = weight.shape
    if wcout != cout:
        raise ShapeError("channel mismatch")
    if out_size is None:
        out_size = ((OH + 2 * ph - kh) // sh + 1, (OW + 2 * pw - kw) // sw + 1)
    H, W = out_size
    x = np.zeros((N, cin, H, W), dtype=y.dtype)
    for h in range(H):
        for w in range(W):
            for a in range(kh):
                r = h * sh + a - ph
                if not 0 <= r < OH:
                    continue
                for b in range(kw):
                    c = w * sw + b - pw
                    if not 0 <= c < OW:
                        continue
                    x[:, :, h, w] += y[:, :, r, c] @ weight[:, :, a, b].T
    return x


def conv2d_1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    N, cin, H, W = x.shape
    cout, wcin = weight.shape
    if wcin != cin:
        raise ShapeError(f"input has {cin} channels but 1x1 weight expects {wcin}")
    xd, wd = x.data, weight.data
    out = np.tensordot(wd, xd, axes=([1], [1])).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g):
        gx = np.tensordot(wd, g, axes=([0], [1])).transpose(1, 0, 2, 3) if x.requires_grad else None
        gw = np.tensordot(g, xd, axes=([0, 2, 3], [0, 2, 3]))
        grads = [None if gx is None else np.ascontiguousarray(gx), gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = [x, weight] + ([bias] if bias is not None else [])
    return _result(out, parents, _backward, "conv2d_1x1")


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @classmethod
    def fresh(cls, channels: int, dtype=np.float64) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState,
                 train: bool) -> Tensor:
    N, C, H, W = x.shape
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError("gamma/beta must have one entry per channel")
    xd = x.data
    eps = state.eps
    axes = (0, 2, 3)
    bshape = (1, C, 1, 1)
    if train:
        count = N * H * W
        if count <= 1:
            raise DegenerateBatchError("batch norm in train mode needs more than one value per channel")
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        unbiased = var * count / (count - 1)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)

    def _backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if train:
            gx = inv_std.reshape(bshape) * (
                gxhat
                - gxhat.mean(axis=axes, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out, [x, gamma, beta], _backward, "batch_norm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # subgradient at exactly zero is 0
    return _result(np.where(mask, x.data, 0).astype(x.dtype), [x],
                   lambda g: (g * mask,), "relu", saved=mask)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    return _result(s, [x], lambda g: (g * s * (1 - s),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    out = np.logaddexp(0, xd)
    return _result(out, [x], lambda g: (g * expit(xd),), "softplus")


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def nearest_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    N, C, H, W = x.shape
    ri = nearest_indices(H, out_h)
    ci = nearest_indices(W, out_w)
    out = x.data[:, :, ri[:, None], ci[None, :]]

    def _backward(g):
        if out_h % H == 0 and out_w % W == 0:
            fh, fw = out_h // H, out_w // W
            return (g.reshape(N, C, H, fh, W, fw).sum(axis=(3, 5)),)
        gi = np.zeros(x.shape, dtype=g.dtype)
        urow, rstart = np.unique(ri, return_index=True)
        ucol, cstart = np.unique(ci, return_index=True)
        red = np.add.reduceat(np.add.reduceat(g, rstart, axis=2), cstart, axis=3)
        gi[:, :, urow[:, None], ucol[None, :]] = red
        return (gi,)

    return _result(out, [x], _backward, "nearest_upsample")


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"cannot add shapes {x.shape} and {y.shape}")
    return _result(x.data + y.data, [x, y], lambda g: (g, g), "add")


def mul(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"cannot multiply shapes {x.shape} and {y.shape}")
    xd, yd = x.data, y.data
    return _result(xd * yd, [x, y], lambda g: (g * yd, g * xd), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    return _result(x.data * c, [x], lambda g: (g * c,), "scale")


def tsum(x: Tensor) -> Tensor:
    return _result(np.asarray(x.data.sum()), [x],
                   lambda g: (np.broadcast_to(g, x.shape).astype(x.dtype),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.data.size)


def index(x: Tensor, i: int) -> Tensor:
    """Scalar element ``x[i]`` of a 1-D tensor."""

    def _backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _result(np.asarray(x.data[i]), [x], _backward, "index")


def _relu_patterns(loss: Tensor) -> list[np.ndarray]:
    return [n.saved for n in build_tape(loss) if n.op == "relu"]


def grad_check(fn, inputs, step: float = 1e-5, samples: int = 20, seed: int = 0,
               atol: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``fn`` is called with no arguments and must return a scalar tensor that
    depends on the tensors in ``inputs``.  Up to ``samples`` coordinates are
    drawn per input.  Coordinates whose +/- perturbation flips any ReLU
    activation pattern are skipped and redrawn.  The relative error uses
    ``max(|analytic|, |numeric|, atol)`` as denominator.
    """
    rng = np.random.default_rng(seed)
    zero_grad(inputs)
    loss = fn()
    grads = backward(loss, inputs)
    base_patterns = _relu_patterns(loss)
    worst = 0.0
    for tensor, grad in zip(inputs, grads):
        flat = tensor.data.reshape(-1)
        order = rng.permutation(flat.size)
        checked = 0
        for idx in order:
            if checked >= samples:
                break
            orig = flat[idx]
            flat[idx] = orig + step
            plus = fn()
            flat[idx] = orig - step
            minus = fn()
            flat[idx] = orig
            pats = _relu_patterns(plus) + _relu_patterns(minus)
            if pats and any(not np.array_equal(p, b) for p, b in
                            zip(pats, base_patterns + base_patterns)):
                continue
            numeric = (plus.item() - minus.item()) / (2 * step)
            analytic = float(grad.reshape(-1)[idx])
            denom = max(abs(analytic), abs(numeric), atol)
            worst = max(worst, abs(analytic - numeric) / denom)
            checked += 1
    return worst


@dataclass
class Adam:
    """Adam with bias correction over a name -> tensor mapping."""

    params: dict
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, p in self.params.items():
            self.m.setdefault(name, np.zeros_like(p.data))
            self.v.setdefault(name, np.zeros_like(p.data))

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)
