"""Minimal reverse-mode differentiable tensor engine on top of numpy.

Kernels are addressed by id through :func:`apply_kernel`; the thin wrappers
below exist so model code reads like ordinary array code.
"""

from neurogen.gradcore.check import grad_check
from neurogen.gradcore.kernels import REGISTRY as KERNELS, causal_mask
from neurogen.gradcore.tensor import (
    DOUBLE,
    SINGLE,
    GradError,
    GradMap,
    GradTape,
    ShapeError,
    Tensor,
    active_tape,
    apply_kernel,
    backward,
)


def matmul(a, b, transpose_b=False):
    return apply_kernel("matmul", [a, b], transpose_b=transpose_b)


def add(a, b):
    return apply_kernel("add", [a, b])


def mul(a, b):
    return apply_kernel("mul", [a, b])


def scale(a, s):
    return apply_kernel("mul", [a], scalar=float(s))


def relu(x):
    return apply_kernel("relu", [x])


def tanh(x):
    return apply_kernel("tanh", [x])


def softmax(x):
    return apply_kernel("softmax", [x])


def log_softmax(x):
    return apply_kernel("log_softmax", [x])


def layernorm(x, gain=None, bias=None, eps=1e-5):
    inputs = [x] + [t for t in (gain, bias) if t is not None]
    return apply_kernel("layernorm", inputs, eps=eps)


def embedding_lookup(table, ids):
    return apply_kernel("embedding_lookup", [table], ids=ids)


def conv2d(x, w, b=None, stride=1, padding=0):
    inputs = [x, w] if b is None else [x, w, b]
    return apply_kernel("conv2d", inputs, stride=stride, padding=padding)


def maxpool2d(x, k):
    return apply_kernel("maxpool2d", [x], k=k)


def global_avg_pool(x):
    return apply_kernel("global_avg_pool", [x])


def mean_reduce(x, axis=None):
    return apply_kernel("mean_reduce", [x], axis=axis)


def sum_reduce(x, axis=None):
    return apply_kernel("sum_reduce", [x], axis=axis)


def concat(tensors, axis=0):
    return apply_kernel("concat", list(tensors), axis=axis)


def slice_view(x, *index):
    return apply_kernel("slice_view", [x], index=tuple(index))


def reshape(x, shape):
    return apply_kernel("reshape", [x], shape=tuple(shape))


def attention(q, k, v, n_heads=1, causal=True):
    return apply_kernel("scaled_dot_attention", [q, k, v], n_heads=n_heads, causal=causal)


def cross_entropy(logits, labels):
    return apply_kernel("cross_entropy", [logits], labels=labels)


def mse(a, b=None):
    return apply_kernel("mse", [a] if b is None else [a, b])


__all__ = [
    "DOUBLE", "SINGLE", "GradError", "GradMap", "GradTape", "KERNELS", "ShapeError",
    "Tensor", "active_tape", "add", "apply_kernel", "attention", "backward",
    "causal_mask", "concat", "conv2d", "cross_entropy", "embedding_lookup",
    "global_avg_pool", "grad_check", "layernorm", "log_softmax", "matmul",
    "maxpool2d", "mean_reduce", "mse", "mul", "relu", "reshape", "scale",
    "slice_view", "softmax", "sum_reduce", "tanh",
]
