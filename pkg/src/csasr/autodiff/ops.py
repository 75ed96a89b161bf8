"""Differentiable primitives.

All primitives are registered in :data:`PRIMITIVES` and reachable through
:func:`apply`. Each one computes its forward value with numpy and records a
closure for the vector-Jacobian product.
"""

from __future__ import annotations

import builtins
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor

PRIMITIVES: Dict[str, Callable[..., Tensor]] = {}


def primitive(name: str):
    def register(fn):
        PRIMITIVES[name] = fn
        return fn

    return register


def apply(op: str, *inputs, **attrs) -> Tensor:
    """Run primitive ``op`` by name."""
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise KeyError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


@primitive("add")
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            _unbroadcast(g, sb) if b.requires_grad else None,
        )

    return Tensor._from_op(a.data + b.data, "add", (a, b), bw)


@primitive("sub")
def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return (
            _unbroadcast(g, sa) if a.requires_grad else None,
            -_unbroadcast(g, sb) if b.requires_grad else None,
        )

    return Tensor._from_op(a.data - b.data, "sub", (a, b), bw)


@primitive("neg")
def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


@primitive("mul")
def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._from_op(ad * bd, "mul", (a, b), bw)


@primitive("matmul")
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul", f"operands need >= 2 axes, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            "matmul",
            f"contracted axes differ: axis -1 of {a.shape} vs axis -2 of {b.shape}",
        )
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", f"batch axes {a.shape[:-2]} and {b.shape[:-2]} do not broadcast") from None
    ad, bd = a.data, b.data
    flat = bd.ndim == 2 and ad.ndim > 2

    def bw(g):
        ga = gb = None
        if flat:
            k, n = bd.shape
            g2 = g.reshape(-1, n)
            if a.requires_grad:
                ga = (g2 @ bd.T).reshape(ad.shape)
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    if flat:
        out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))
    else:
        out = np.matmul(ad, bd)
    return Tensor._from_op(out, "matmul", (a, b), bw)


# ---------------------------------------------------------------------------
# activations and normalisation
# ---------------------------------------------------------------------------


@primitive("softmax")
def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return Tensor._from_op(p, "softmax", (x,), bw)


@primitive("log_softmax")
def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=-1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return Tensor._from_op(out, "log_softmax", (x,), bw)


@primitive("layer_norm")
def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer_norm", f"gain/bias must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._from_op(out, "layer_norm", (x, gamma, beta), bw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@primitive("swish")
def swish(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    out = x.data * s

    def bw(g):
        return (g * (s + out * (1.0 - s)),)

    return Tensor._from_op(out, "swish", (x,), bw)


@primitive("relu")
def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0

    def bw(g):
        return (g * pos,)

    return Tensor._from_op(x.data * pos, "relu", (x,), bw)


@primitive("glu")
def glu(x) -> Tensor:
    """Gated linear unit over the last axis: first half times sigmoid(second half)."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d % 2:
        raise ShapeError("glu", f"last axis must be even, got {d}")
    a, b = x.data[..., : d // 2], x.data[..., d // 2 :]
    s = _sigmoid(b)

    def bw(g):
        return (np.concatenate([g * s, g * a * s * (1.0 - s)], axis=-1),)

    return Tensor._from_op(a * s, "glu", (x,), bw)


@primitive("dropout")
def dropout(x, p: float, rng: Optional[np.random.Generator] = None, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape, dtype=np.float32) >= p) * (1.0 / (1.0 - p))
    return Tensor._from_op(x.data * keep, "dropout", (x,), lambda g: (g * keep,))


@primitive("masked_fill")
def masked_fill(x, mask, value: float = -np.inf) -> Tensor:
    """Replace entries where ``mask`` is true by ``value`` (additive -inf mask by default)."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        mask = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError("masked_fill", f"mask shape {mask.shape} does not broadcast to {x.shape}") from None
    out = np.where(mask, value, x.data)
    return Tensor._from_op(out, "masked_fill", (x,), lambda g: (np.where(mask, 0.0, g),))


@primitive("scale_grad")
def scale_grad(x, factor: float) -> Tensor:
    """Identity forward; multiplies the incoming gradient by ``factor``."""
    x = as_tensor(x)
    factor = float(factor)
    return Tensor._from_op(x.data, "scale_grad", (x,), lambda g: (g * factor,))


@primitive("stop_gradient")
def stop_gradient(x) -> Tensor:
    """Identity forward; no gradient reaches ``x``."""
    x = as_tensor(x)
    return Tensor._from_op(x.data, "stop_gradient", (x,), lambda g: (None,))


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------


@primitive("transpose")
def transpose(x, axes: Optional[Sequence[int]] = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", f"axes {axes} are not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return Tensor._from_op(np.transpose(x.data, axes), "transpose", (x,), lambda g: (np.transpose(g, inv),))


@primitive("reshape")
def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {src} into {tuple(shape)}") from None
    return Tensor._from_op(out, "reshape", (x,), lambda g: (g.reshape(src),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(
        isinstance(i, (builtins.slice, int, np.integer)) or i is None or i is Ellipsis for i in items
    )


@primitive("slice")
def slice(x, index) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data[index]
    except IndexError as exc:
        raise ShapeError("slice", f"{exc} (input shape {x.shape})") from None
    basic = _is_basic_index(index)
    src = x.shape

    def bw(g):
        gx = np.zeros(src, dtype=DTYPE)
        if basic:
            gx[index] += g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return Tensor._from_op(np.asarray(out, dtype=DTYPE), "slice", (x,), bw)


@primitive("concat")
def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat", "no inputs")
    ref = tensors[0]
    ax = axis % ref.ndim
    for i, t in enumerate(tensors[1:], start=1):
        if t.ndim != ref.ndim or any(
            t.shape[k] != ref.shape[k] for k in range(ref.ndim) if k != ax
        ):
            raise ShapeError("concat", f"input {i} shape {t.shape} mismatches {ref.shape} off axis {ax}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [builtins.slice(None)] * g.ndim
                idx[ax] = builtins.slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return out

    return Tensor._from_op(np.concatenate([t.data for t in tensors], axis=ax), "concat", tensors, bw)


@primitive("sum")
def sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=DTYPE), "sum", (x,), bw)


@primitive("mean")
def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size // max(np.asarray(out).size, 1)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=DTYPE), "mean", (x,), bw)


# ---------------------------------------------------------------------------
# lookup and convolution
# ---------------------------------------------------------------------------


@primitive("embedding")
def embedding(weight, ids) -> Tensor:
    weight = as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", f"table must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding", f"ids outside [0, {weight.shape[0]}) on axis 0 of the table")
    v, d = weight.shape

    def bw(g):
        gw = np.zeros((v, d), dtype=DTYPE)
        np.add.at(gw, ids.ravel(), g.reshape(-1, d))
        return (gw,)

    return Tensor._from_op(weight.data[ids], "embedding", (weight,), bw)


@primitive("depthwise_conv1d")
def depthwise_conv1d(x, weight, bias=None) -> Tensor:
    """Per-channel 1-D convolution over time with 'same' zero padding.

    x: (B, T, C); weight: (K, C) with odd K; bias: (C,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 3:
        raise ShapeError("depthwise_conv1d", f"input must be (B, T, C), got {x.shape}")
    k, c = weight.shape
    if c != x.shape[2]:
        raise ShapeError("depthwise_conv1d", f"channel axis 2 of input ({x.shape[2]}) != kernel channels ({c})")
    if k % 2 == 0:
        raise ShapeError("depthwise_conv1d", f"kernel size must be odd, got {k}")
    pad = (k - 1) // 2
    t = x.shape[1]
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[:, j : j + t, :] * weight.data[j]
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, j : j + t, :] += g * weight.data[j]
            gx = gxp[:, pad : pad + t, :]
        if weight.requires_grad:
            gw = np.stack([(xp[:, j : j + t, :] * g).sum(axis=(0, 1)) for j in range(k)])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return Tensor._from_op(out, "depthwise_conv1d", parents, bw)


@primitive("conv2d")
def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation. x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and kernel, got {x.shape} and {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError("conv2d", f"input channels (axis 1) {cin} != kernel channels (axis 1) {wcin}")
    s, p = int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    if hp < kh or wp < kw:
        raise ShapeError("conv2d", f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    ho, wo = (hp - kh) // s + 1, (wp - kw) // s + 1
    # channel-last internally: patches are (B, Ho, Wo, kh, kw, Cin)
    xp = np.pad(x.data.transpose(0, 2, 3, 1), ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, ho, wo, kh, kw, cin), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i : i + s * ho : s, j : j + s * wo : s, :]
    cols2 = cols.reshape(b * ho * wo, kh * kw * cin)
    wmat = weight.data.transpose(2, 3, 1, 0).reshape(kh * kw * cin, cout)
    out = cols2 @ wmat
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    out = out.reshape(b, ho, wo, cout).transpose(0, 3, 1, 2)

    def bw(g):
        gx = gw = gb = None
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(b, ho, wo, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + s * ho : s, j : j + s * wo : s, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2)
        if weight.requires_grad:
            gw = (cols2.T @ g2).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return Tensor._from_op(np.ascontiguousarray(out), "conv2d", parents, bw)
