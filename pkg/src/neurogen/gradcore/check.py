"""Central finite-difference gradient check."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from neurogen.gradcore.tensor import GradError, GradTape, Tensor, backward


def _scalar(out: Tensor) -> float:
    if out.data.size != 1:
        raise GradError(f"function must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(()))


def grad_check(
    fn: Callable[[Tensor], Tensor],
    point,
    epsilon: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``fn`` maps a tensor to a scalar tensor. ``point`` is promoted to double
    precision. ``indices`` restricts the comparison to selected flat
    coordinates, which keeps checks of large inputs cheap.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)

    x = Tensor(base.copy(), requires_grad=True)
    with GradTape() as tape:
        out = fn(x)
    _scalar(out)
    analytic = backward(out, tape, wrt=[x])[x].reshape(-1)

    coords = range(base.size) if indices is None else indices
    worst = 0.0
    flat = base.reshape(-1)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + epsilon
        up = _scalar(fn(Tensor(base.copy())))
        flat[i] = orig - epsilon
        down = _scalar(fn(Tensor(base.copy())))
        flat[i] = orig
        numeric = (up - down) / (2 * epsilon)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
