"""Differentiable primitives over :class:`~mambalite.tensor.Tensor`.

Each primitive computes its forward value with numpy and records a closure
mapping the upstream gradient to gradients of its inputs. Feature maps are
``B×C×H×W``; token sequences are ``B×N×C``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterator, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .tensor import Tensor, as_tensor

Array = np.ndarray


# -- multiply-accumulate instrumentation -------------------------------------


class MacCounter:
    def __init__(self) -> None:
        self.total = 0
        self.by_kind: dict = {}

    def add(self, kind: str, n: int) -> None:
        self.total += int(n)
        self.by_kind[kind] = self.by_kind.get(kind, 0) + int(n)


_counter: List[MacCounter] = []


@contextlib.contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Count multiply-accumulates executed by conv/matmul/scan primitives."""
    c = MacCounter()
    _counter.append(c)
    try:
        yield c
    finally:
        _counter.remove(c)


def record_macs(kind: str, n: int) -> None:
    for c in _counter:
        c.add(kind, n)


# -- piecewise selections ---------------------------------------------------------


class PieceLog:
    """Selections made by piecewise-linear ops (ReLU masks, clamp sides, pool winners).

    While recording, each op appends its selection. After :meth:`replay`,
    every later evaluation reuses the recorded selections in call order, so
    the function is evaluated on one fixed linear piece. That is the piece
    the backward pass differentiates.
    """

    def __init__(self) -> None:
        self.choices: List[tuple] = []
        self.replaying = False
        self.pos = 0

    def replay(self) -> None:
        self.replaying, self.pos = True, 0

    def choose(self, op: str, compute):
        if not self.replaying:
            c = compute()
            self.choices.append((op, c))
            return c
        if self.pos >= len(self.choices) or self.choices[self.pos][0] != op:
            raise RuntimeError("replayed evaluation does not follow the recorded op sequence")
        c = self.choices[self.pos][1]
        self.pos += 1
        return c


_pieces: List[PieceLog] = []


@contextlib.contextmanager
def frozen_pieces() -> Iterator[PieceLog]:
    log = PieceLog()
    _pieces.append(log)
    try:
        yield log
    finally:
        _pieces.remove(log)


def _choose(op: str, compute):
    return _pieces[-1].choose(op, compute) if _pieces else compute()


# -- helpers ---------------------------------------------------------------------


def _lift(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return as_tensor(np.asarray(x, dtype=dtype), dtype=dtype)


def _unbroadcast(g: Array, shape: tuple) -> Array:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _result(data, parents, backward, op) -> Tensor:
    return Tensor._result(data, parents, backward, op)


# -- elementwise arithmetic ------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(out, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _result(out, (a, b), backward, "div")


def ew(op: str, a: Tensor, b) -> Tensor:
    """Strict elementwise op: ``add``/``mul`` need equal shapes, ``scale`` a scalar ``b``."""
    if op == "scale":
        if isinstance(b, Tensor) and b.size != 1:
            raise ValueError("scale expects a scalar")
        return mul(a, b)
    if not isinstance(b, Tensor) or a.shape != b.shape:
        raise ValueError(f"ew({op}) shape mismatch: {a.shape} vs {getattr(b, 'shape', None)}")
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    below, above = _choose("clamp", lambda: (x.data < lo, x.data > hi))
    out = np.where(below, lo, np.where(above, hi, x.data))
    mask = ~(below | above)
    return _result(out, (x,), lambda g: (g * mask,), "clamp")


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    out = np.asarray(out, dtype=x.dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


# -- shape manipulation ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    out = np.transpose(x.data, axes)
    return _result(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def flip(x: Tensor, axis: int) -> Tensor:
    out = np.flip(x.data, axis=axis)
    return _result(out, (x,), lambda g: (np.flip(g, axis=axis),), "flip")


def slice_axis(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx]

    def backward(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _result(out, (x,), backward, "slice")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g):
        parts = []
        for i in range(len(xs)):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            parts.append(g[tuple(idx)])
        return tuple(parts)

    return _result(out, xs, backward, "concat")


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    return concat(xs, axis=1)


def split(x: Tensor, k: int, axis: int = 1) -> List[Tensor]:
    n = x.shape[axis]
    if k < 1 or n % k:
        raise ValueError(f"cannot split {n} channels into {k} equal groups")
    step = n // k
    return [slice_axis(x, i * step, (i + 1) * step, axis) for i in range(k)]


def split_channels(x: Tensor, k: int) -> List[Tensor]:
    return split(x, k, axis=1)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    out = np.stack([t.data for t in xs], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _result(out, xs, backward, "stack")


def unstack(x: Tensor, axis: int = 0) -> List[Tensor]:
    return [reshape(slice_axis(x, i, i + 1, axis), x.shape[:axis] + x.shape[axis + 1:])
            for i in range(x.shape[axis])]


# -- linear algebra --------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    out = np.matmul(a.data, b.data)
    record_macs("matmul", out.size * a.shape[-1])

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight (+ bias)`` with ``weight`` stored as ``in×out``."""
    y = matmul(x, weight)
    return add(y, bias) if bias is not None else y


# -- activations ----------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = _choose("relu", lambda: x.data > 0)
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(x: Tensor) -> Tensor:
    s = special.expit(x.data)
    out = x.data * s
    return _result(out, (x,), lambda g: (g * (s + out * (1 - s)),), "silu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x·Φ(x)`` with the Gaussian CDF via erf."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), backward, "gelu")


def softplus(x: Tensor) -> Tensor:
    out = np.logaddexp(0.0, x.data).astype(x.dtype)
    return _result(out, (x,), lambda g: (g * special.expit(x.data),), "softplus")


def activation(x: Tensor, kind: str) -> Tensor:
    fns = {"silu": silu, "gelu": gelu, "relu": relu, "sigmoid": sigmoid}
    try:
        return fns[kind.lower()](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), backward, "softmax")


def softmax_lastdim(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


# -- convolution and resampling -------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation of ``B×Cin×H×W`` with ``Cout×(Cin/groups)×k×k`` weights."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError("conv2d expects 4-D input and weight")
    B, Cin, H, W = x.shape
    Cout, Cg, kh, kw = weight.shape
    if groups < 1 or Cin % groups or Cout % groups:
        raise ValueError(f"groups={groups} must divide Cin={Cin} and Cout={Cout}")
    if Cg * groups != Cin:
        raise ValueError(f"weight expects {Cg * groups} input channels, got {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ValueError("bias shape mismatch")
    s, p = stride, padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if Ho < 1 or Wo < 1:
        raise ValueError("kernel larger than padded input")
    w = weight.data
    record_macs("conv", B * Cout * Cg * kh * kw * Ho * Wo)

    def win(arr, i, j):
        return arr[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s]

    depthwise = groups == Cin and Cg == 1 and Cout == Cin
    if depthwise:
        out = np.zeros((B, Cout, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                out += win(xp, i, j) * w[:, 0, i, j][None, :, None, None]
    else:
        Co = Cout // groups
        out = np.empty((B, Cout, Ho, Wo), dtype=x.dtype)
        cols_cache = []
        for gi in range(groups):
            xg = xp[:, gi * Cg:(gi + 1) * Cg]
            cols = sliding_window_view(xg, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
            cols = np.ascontiguousarray(cols.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, Cg * kh * kw)
            wg = w[gi * Co:(gi + 1) * Co].reshape(Co, Cg * kh * kw)
            og = cols @ wg.T
            out[:, gi * Co:(gi + 1) * Co] = og.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)
            cols_cache.append(cols)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.zeros_like(w)
        if depthwise:
            for i in range(kh):
                for j in range(kw):
                    win(gxp, i, j)[...] += g * w[:, 0, i, j][None, :, None, None]
                    gw[:, 0, i, j] = np.einsum("bchw,bchw->c", g, win(xp, i, j))
        else:
            Co = Cout // groups
            for gi in range(groups):
                gg = g[:, gi * Co:(gi + 1) * Co].transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
                cols = cols_cache[gi]
                gw[gi * Co:(gi + 1) * Co] = (gg.T @ cols).reshape(Co, Cg, kh, kw)
                wg = w[gi * Co:(gi + 1) * Co].reshape(Co, Cg * kh * kw)
                gcols = (gg @ wg).reshape(B, Ho, Wo, Cg, kh, kw)
                sub_gxp = gxp[:, gi * Cg:(gi + 1) * Cg]
                for i in range(kh):
                    for j in range(kw):
                        win(sub_gxp, i, j)[...] += gcols[..., i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backward, "conv2d")


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    if kernel != stride:
        raise ValueError("only non-overlapping pooling (kernel == stride) is supported")
    B, C, H, W = x.shape
    k = kernel
    if H % k or W % k:
        raise ValueError(f"spatial dims {H}×{W} not divisible by pool size {k}")
    blocks = x.data.reshape(B, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // k, W // k, k * k)
    idx = _choose("max_pool2d", lambda: blocks.argmax(axis=-1))
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(B, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _result(out, (x,), backward, "max_pool2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour ×2: each pixel becomes a 2×2 block."""
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    B, C, H, W = x.shape

    def backward(g):
        return (g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), backward, "upsample2x")


# -- normalisation -------------------------------------------------------------------


def _normalize_backward(gxhat: Array, xhat: Array, inv_std: Array, axes) -> Array:
    m1 = gxhat.mean(axis=axes, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=axes, keepdims=True)
    return inv_std * (gxhat - m1 - xhat * m2)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply a per-channel affine map."""
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = _normalize_backward(g * gamma.data, xhat, inv_std, -1)
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _result(out.astype(x.dtype), (x, gamma, beta), backward, "layer_norm")


def group_norm(x: Tensor, num_groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    B, C, H, W = x.shape
    if num_groups < 1 or C % num_groups:
        raise ValueError(f"num_groups={num_groups} does not divide C={C}")
    xg = x.data.reshape(B, num_groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    var = xg.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(B, C, H, W)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def backward(g):
        gxhat = (g * gamma.data[None, :, None, None]).reshape(B, num_groups, -1)
        gx = _normalize_backward(gxhat, xhat.reshape(B, num_groups, -1), inv_std, -1).reshape(B, C, H, W)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _result(out.astype(x.dtype), (x, gamma, beta), backward, "group_norm")


def batch_norm2d(x: Tensor, gamma: Tensor, beta: Tensor, running: Optional[dict],
                 training: bool, eps: float = 1e-5, momentum: float = 0.1) -> Tensor:
    """Batch normalisation over (B, H, W) per channel.

    ``running`` holds ``mean`` and ``var`` arrays; train mode updates them in
    place (unbiased variance, exponential moving average with ``momentum``).
    """
    B, C, H, W = x.shape
    g_ = gamma.data[None, :, None, None]
    if training:
        m = B * H * W
        if m < 2:
            raise ValueError("batch_norm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3), keepdims=True)
        var = x.data.var(axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        if running is not None:
            running["mean"] *= 1 - momentum
            running["mean"] += momentum * mu.reshape(C)
            running["var"] *= 1 - momentum
            running["var"] += momentum * var.reshape(C) * m / (m - 1)

        def backward(g):
            gx = _normalize_backward(g * g_, xhat, inv_std, (0, 2, 3))
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))
    else:
        if running is None or "mean" not in running:
            raise ValueError("batch_norm2d inference requires recorded running statistics")
        mu = running["mean"][None, :, None, None]
        inv_std = 1.0 / np.sqrt(running["var"][None, :, None, None] + eps)
        xhat = (x.data - mu) * inv_std

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = (xhat * g_ + beta.data[None, :, None, None]).astype(x.dtype)
    return _result(out, (x, gamma, beta), backward, "batch_norm2d")


# -- attention ------------------------------------------------------------------------


def mha_forward(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor, heads: int,
                bq: Optional[Tensor] = None, bk: Optional[Tensor] = None,
                bv: Optional[Tensor] = None, bo: Optional[Tensor] = None) -> Tensor:
    """Multi-head scaled dot-product self-attention over ``B×N×C`` tokens."""
    B, N, C = x.shape
    if heads < 1 or C % heads:
        raise ValueError(f"heads={heads} does not divide C={C}")
    dh = C // heads

    def split_heads(t):
        return transpose(reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split_heads(linear(x, wq, bq))
    k = split_heads(linear(x, wk, bk))
    v = split_heads(linear(x, wv, bv))
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores, axis=-1)
    ctx = transpose(matmul(attn, v), (0, 2, 1, 3))
    return linear(reshape(ctx, (B, N, C)), wo, bo)


# -- feature map <-> token layout ----------------------------------------------------


def to_tokens(x: Tensor) -> Tensor:
    """``B×C×H×W`` → ``B×(H·W)×C`` with row-major flattening."""
    B, C, H, W = x.shape
    return transpose(reshape(x, (B, C, H * W)), (0, 2, 1))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    B, N, C = t.shape
    if N != h * w:
        raise ValueError(f"token count {N} != {h}×{w}")
    return reshape(transpose(t, (0, 2, 1)), (B, C, h, w))
