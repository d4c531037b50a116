"""Forward and backward rules for every supported kernel.

Each kernel is a pair of plain numpy functions::

    forward(arrays, attrs) -> (out, ctx)
    backward(grad_out, arrays, out, ctx, attrs, needs) -> [grad per input]

``needs[i]`` is False when input ``i`` does not require a gradient; the
backward rule may return None for it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class KernelShapeError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    forward: Callable
    backward: Callable
    arity: tuple[int, int]  # min, max number of inputs


REGISTRY: dict[str, KernelSpec] = {}


def _register(name, arity):
    def deco(pair):
        fwd, bwd = pair()
        REGISTRY[name] = KernelSpec(fwd, bwd, arity)
        return pair

    return deco


def _check_arity(name, arrays):
    lo, hi = REGISTRY[name].arity
    if not lo <= len(arrays) <= hi:
        raise KernelShapeError(f"expected {lo}..{hi} inputs, got {len(arrays)}")


def _unbroadcast(grad, shape):
    """Sum ``grad`` over the leading axes that were broadcast to reach it."""
    if grad.shape == tuple(shape):
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0) if lead > 0 else grad


def _trailing_compatible(a_shape, b_shape):
    return len(b_shape) <= len(a_shape) and tuple(a_shape[len(a_shape) - len(b_shape):]) == tuple(b_shape)


# elementwise ---------------------------------------------------------------

@_register("add", (2, 2))
def _add():
    def fwd(arrays, attrs):
        _check_arity("add", arrays)
        a, b = arrays
        if a.shape != b.shape and not _trailing_compatible(a.shape, b.shape):
            raise KernelShapeError("second operand must match or be a trailing bias")
        return a + b, None

    def bwd(g, arrays, out, ctx, attrs, needs):
        a, b = arrays
        return [g if needs[0] else None, _unbroadcast(g, b.shape) if needs[1] else None]

    return fwd, bwd


@_register("mul", (1, 2))
def _mul():
    def fwd(arrays, attrs):
        _check_arity("mul", arrays)
        if len(arrays) == 1:
            if "scalar" not in attrs:
                raise KernelShapeError("single-input mul needs a 'scalar' attribute")
            return arrays[0] * arrays[0].dtype.type(attrs["scalar"]), None
        a, b = arrays
        if a.shape != b.shape:
            raise KernelShapeError("operands must have identical shapes")
        return a * b, None

    def bwd(g, arrays, out, ctx, attrs, needs):
        if len(arrays) == 1:
            return [g * g.dtype.type(attrs["scalar"])]
        a, b = arrays
        return [g * b if needs[0] else None, g * a if needs[1] else None]

    return fwd, bwd


@_register("relu", (1, 1))
def _relu():
    def fwd(arrays, attrs):
        x = arrays[0]
        return np.maximum(x, 0), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        return [g * (arrays[0] > 0)]

    return fwd, bwd


@_register("tanh", (1, 1))
def _tanh():
    def fwd(arrays, attrs):
        return np.tanh(arrays[0]), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        return [g * (1 - out * out)]

    return fwd, bwd


# linear algebra --------------------------------------------------------------

@_register("matmul", (2, 2))
def _matmul():
    """``a @ b`` (or ``a @ b.T`` with transpose_b); ``a`` may carry leading batch axes."""

    def fwd(arrays, attrs):
        _check_arity("matmul", arrays)
        a, b = arrays
        if b.ndim != 2 or a.ndim < 1:
            raise KernelShapeError("right operand must be 2-D")
        bt = b.T if attrs.get("transpose_b") else b
        if a.shape[-1] != bt.shape[0]:
            raise KernelShapeError("inner dimensions differ")
        return a @ bt, None

    def bwd(g, arrays, out, ctx, attrs, needs):
        a, b = arrays
        tb = attrs.get("transpose_b", False)
        bt = b.T if tb else b
        ga = gb = None
        if needs[0]:
            ga = g @ bt.T
        if needs[1]:
            a2 = a.reshape(-1, a.shape[-1])
            g2 = g.reshape(-1, g.shape[-1])
            gbt = a2.T @ g2
            gb = gbt.T if tb else gbt
        return [ga, gb]

    return fwd, bwd


# normalizations ----------------------------------------------------------------

@_register("softmax", (1, 1))
def _softmax():
    def fwd(arrays, attrs):
        x = arrays[0]
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        return [out * (g - (g * out).sum(axis=-1, keepdims=True))]

    return fwd, bwd


def _log_softmax_np(x):
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@_register("log_softmax", (1, 1))
def _log_softmax():
    def fwd(arrays, attrs):
        return _log_softmax_np(arrays[0]), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        return [g - np.exp(out) * g.sum(axis=-1, keepdims=True)]

    return fwd, bwd


@_register("layernorm", (1, 3))
def _layernorm():
    """Normalize over the last axis; optional gain and bias inputs."""

    def fwd(arrays, attrs):
        x = arrays[0]
        eps = attrs.get("eps", 1e-5)
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        rstd = 1.0 / np.sqrt(var + eps)
        xhat = xc * rstd
        y = xhat
        if len(arrays) > 1:
            if arrays[1].shape != x.shape[-1:]:
                raise KernelShapeError("gain must match the normalized axis")
            y = y * arrays[1]
        if len(arrays) > 2:
            if arrays[2].shape != x.shape[-1:]:
                raise KernelShapeError("bias must match the normalized axis")
            y = y + arrays[2]
        return y, (xhat, rstd)

    def bwd(g, arrays, out, ctx, attrs, needs):
        xhat, rstd = ctx
        grads = [None] * len(arrays)
        gx = g * arrays[1] if len(arrays) > 1 else g
        if needs[0]:
            n = xhat.shape[-1]
            grads[0] = rstd / n * (
                n * gx - gx.sum(axis=-1, keepdims=True)
                - xhat * (gx * xhat).sum(axis=-1, keepdims=True)
            )
        if len(arrays) > 1 and needs[1]:
            grads[1] = (g * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
        if len(arrays) > 2 and needs[2]:
            grads[2] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return grads

    return fwd, bwd


# lookups and views ---------------------------------------------------------------

@_register("embedding_lookup", (1, 1))
def _embedding_lookup():
    def fwd(arrays, attrs):
        table = arrays[0]
        ids = np.asarray(attrs["ids"])
        if table.ndim != 2:
            raise KernelShapeError("embedding table must be 2-D")
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise KernelShapeError("token id out of range")
        return table[ids], None

    def bwd(g, arrays, out, ctx, attrs, needs):
        table = arrays[0]
        gt = np.zeros_like(table)
        np.add.at(gt, np.asarray(attrs["ids"]).reshape(-1), g.reshape(-1, table.shape[1]))
        return [gt]

    return fwd, bwd


@_register("concat", (1, 1 << 16))
def _concat():
    def fwd(arrays, attrs):
        axis = attrs.get("axis", 0)
        shapes = [list(a.shape) for a in arrays]
        ref = shapes[0]
        for s in shapes[1:]:
            if len(s) != len(ref) or any(x != y for i, (x, y) in enumerate(zip(s, ref)) if i != axis % len(ref)):
                raise KernelShapeError("non-concatenated axes must agree")
        return np.concatenate(arrays, axis=axis), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        axis = attrs.get("axis", 0)
        bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        parts = np.split(g, bounds, axis=axis)
        return [p if n else None for p, n in zip(parts, needs)]

    return fwd, bwd


@_register("slice_view", (1, 1))
def _slice_view():
    """Basic (slice/int) indexing; ``attrs['index']`` is a tuple of slices."""

    def fwd(arrays, attrs):
        index = attrs["index"]
        for item in index:
            if not isinstance(item, (slice, int, np.integer)):
                raise KernelShapeError("only basic slicing is supported")
        return arrays[0][index], None

    def bwd(g, arrays, out, ctx, attrs, needs):
        gx = np.zeros_like(arrays[0])
        gx[attrs["index"]] = g
        return [gx]

    return fwd, bwd


@_register("reshape", (1, 1))
def _reshape():
    def fwd(arrays, attrs):
        x = arrays[0]
        shape = tuple(attrs["shape"])
        known = [d for d in shape if d != -1]
        size = int(np.prod(known)) if known else 1
        if -1 not in shape and size != x.size or (-1 in shape and (size == 0 or x.size % size)):
            raise KernelShapeError(f"cannot reshape to {shape}")
        return x.reshape(shape), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        return [g.reshape(arrays[0].shape)]

    return fwd, bwd


# reductions ------------------------------------------------------------------

def _axis_expand(g, shape, axis):
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


@_register("sum_reduce", (1, 1))
def _sum_reduce():
    def fwd(arrays, attrs):
        axis = attrs.get("axis")
        return np.asarray(arrays[0].sum(axis=axis if axis is None else axis)), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        x = arrays[0]
        return [np.array(_axis_expand(g, x.shape, attrs.get("axis")))]

    return fwd, bwd


@_register("mean_reduce", (1, 1))
def _mean_reduce():
    def fwd(arrays, attrs):
        axis = attrs.get("axis")
        return np.asarray(arrays[0].mean(axis=axis)), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        x = arrays[0]
        axis = attrs.get("axis")
        count = x.size if axis is None else x.size // max(np.asarray(out).size, 1)
        return [np.array(_axis_expand(g, x.shape, axis)) / count]

    return fwd, bwd


# convolution and pooling ---------------------------------------------------------

def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


@_register("conv2d", (2, 3))
def _conv2d():
    """Cross-correlation, NCHW input, OIHW weight, optional bias of length O."""

    def fwd(arrays, attrs):
        _check_arity("conv2d", arrays)
        x, w = arrays[0], arrays[1]
        if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
            raise KernelShapeError("expected NCHW input and OIHW weight with matching C")
        stride = attrs.get("stride", 1)
        pad = attrs.get("padding", 0)
        xp = _pad(x, pad)
        kh, kw = w.shape[2:]
        if xp.shape[2] < kh or xp.shape[3] < kw:
            raise KernelShapeError("kernel larger than padded input")
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        # win: N, C, Ho, Wo, kh, kw
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
        out = out.transpose(0, 3, 1, 2)
        if len(arrays) == 3:
            b = arrays[2]
            if b.shape != (w.shape[0],):
                raise KernelShapeError("bias must have one entry per output channel")
            out = out + b[None, :, None, None]
        return np.ascontiguousarray(out), win

    def bwd(g, arrays, out, ctx, attrs, needs):
        x, w = arrays[0], arrays[1]
        win = ctx
        stride = attrs.get("stride", 1)
        pad = attrs.get("padding", 0)
        kh, kw = w.shape[2:]
        grads = [None] * len(arrays)
        if needs[1]:
            grads[1] = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # O, C, kh, kw
        if len(arrays) == 3 and needs[2]:
            grads[2] = g.sum(axis=(0, 2, 3))
        if needs[0]:
            n, c, h, wd = x.shape
            gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=x.dtype)
            ho, wo = g.shape[2:]
            # per kernel offset: contribution g[n,o,i,j] * w[o,c,di,dj]
            gw = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
            for di in range(kh):
                for dj in range(kw):
                    gxp[:, :, di:di + stride * ho:stride, dj:dj + stride * wo:stride] += (
                        gw[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
                    )
            grads[0] = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
        return grads

    return fwd, bwd


@_register("maxpool2d", (1, 1))
def _maxpool2d():
    """Non-overlapping k×k max pooling; trailing rows/cols that do not fill a window are dropped.

    Ties resolve to the first index in row-major order within the window.
    """

    def fwd(arrays, attrs):
        x = arrays[0]
        k = attrs["k"]
        if x.ndim != 4:
            raise KernelShapeError("expected NCHW input")
        n, c, h, w = x.shape
        ho, wo = h // k, w // k
        if ho == 0 or wo == 0:
            raise KernelShapeError(f"pool size {k} exceeds spatial size {h}x{w}")
        xc = x[:, :, : ho * k, : wo * k].reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
        flat = xc.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, idx

    def bwd(g, arrays, out, ctx, attrs, needs):
        x = arrays[0]
        k = attrs["k"]
        n, c, h, w = x.shape
        ho, wo = g.shape[2:]
        flat = np.zeros((n, c, ho, wo, k * k), dtype=x.dtype)
        np.put_along_axis(flat, ctx[..., None], g[..., None], axis=-1)
        blocks = flat.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * k, wo * k)
        gx = np.zeros_like(x)
        gx[:, :, : ho * k, : wo * k] = blocks
        return [gx]

    return fwd, bwd


@_register("global_avg_pool", (1, 1))
def _global_avg_pool():
    def fwd(arrays, attrs):
        x = arrays[0]
        if x.ndim != 4:
            raise KernelShapeError("expected NCHW input")
        return x.mean(axis=(2, 3)), None

    def bwd(g, arrays, out, ctx, attrs, needs):
        x = arrays[0]
        hw = x.shape[2] * x.shape[3]
        return [np.broadcast_to(g[:, :, None, None] / hw, x.shape).copy()]

    return fwd, bwd


# attention ------------------------------------------------------------------

def causal_mask(length: int) -> np.ndarray:
    """Boolean [L, L] matrix; entry (i, j) is True when position i may attend to j."""
    return np.tril(np.ones((length, length), dtype=bool))


@_register("scaled_dot_attention", (3, 3))
def _attention():
    """Multi-head attention over a single sequence: q, k, v are [L, d]."""

    def fwd(arrays, attrs):
        q, k, v = arrays
        heads = attrs.get("n_heads", 1)
        if not (q.shape == k.shape == v.shape) or q.ndim != 2 or q.shape[1] % heads:
            raise KernelShapeError("q, k, v must be equal [L, d] with d divisible by n_heads")
        length, d = q.shape
        dh = d // heads
        qh = q.reshape(length, heads, dh).transpose(1, 0, 2)
        kh = k.reshape(length, heads, dh).transpose(1, 0, 2)
        vh = v.reshape(length, heads, dh).transpose(1, 0, 2)
        scale = q.dtype.type(1.0 / np.sqrt(dh))
        scores = (qh @ kh.transpose(0, 2, 1)) * scale
        if attrs.get("causal", True):
            scores = np.where(causal_mask(length)[None], scores, -np.inf)
        scores = scores - scores.max(axis=-1, keepdims=True)
        p = np.exp(scores)
        p /= p.sum(axis=-1, keepdims=True)
        out = (p @ vh).transpose(1, 0, 2).reshape(length, d)
        return out, (qh, kh, vh, p, scale)

    def bwd(g, arrays, out, ctx, attrs, needs):
        qh, kh, vh, p, scale = ctx
        heads, length, dh = qh.shape
        gh = g.reshape(length, heads, dh).transpose(1, 0, 2)
        gv = p.transpose(0, 2, 1) @ gh
        gp = gh @ vh.transpose(0, 2, 1)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ kh) * scale
        gk = (gs.transpose(0, 2, 1) @ qh) * scale

        def merge(t):
            return t.transpose(1, 0, 2).reshape(length, heads * dh)

        return [merge(gq) if needs[0] else None, merge(gk) if needs[1] else None,
                merge(gv) if needs[2] else None]

    return fwd, bwd


# losses ----------------------------------------------------------------------

@_register("cross_entropy", (1, 1))
def _cross_entropy():
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""

    def fwd(arrays, attrs):
        logits = arrays[0]
        labels = np.asarray(attrs["labels"])
        if logits.ndim != 2 or labels.shape != (logits.shape[0],):
            raise KernelShapeError("expected [B, C] logits and B labels")
        if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
            raise KernelShapeError("label out of range")
        logp = _log_softmax_np(logits)
        nll = -logp[np.arange(labels.size), labels]
        return np.asarray(nll.mean()), logp

    def bwd(g, arrays, out, ctx, attrs, needs):
        labels = np.asarray(attrs["labels"])
        probs = np.exp(ctx)
        probs[np.arange(labels.size), labels] -= 1
        return [probs * (g / labels.size)]

    return fwd, bwd


@_register("mse", (1, 2))
def _mse():
    """mean((a - b)^2); with one input, b is the constant ``attrs['target']`` (default 0)."""

    def fwd(arrays, attrs):
        a = arrays[0]
        b = arrays[1] if len(arrays) == 2 else np.asarray(attrs.get("target", 0.0), dtype=a.dtype)
        if len(arrays) == 2 and a.shape != b.shape:
            raise KernelShapeError("operands must have identical shapes")
        diff = a - b
        return np.asarray((diff * diff).mean()), diff

    def bwd(g, arrays, out, ctx, attrs, needs):
        gd = ctx * (2 * g / ctx.size)
        if len(arrays) == 1:
            return [np.broadcast_to(gd, arrays[0].shape).copy()]
        return [gd if needs[0] else None, -gd if needs[1] else None]

    return fwd, bwd
