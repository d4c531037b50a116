"""Learning-rate schedule and worker-count helpers shared by all trainers."""

import os


def lr_at(initial: float, epoch: int, halve_every: int = 10) -> float:
    """Step decay: ``initial * 0.5 ** (epoch // halve_every)`` for 0-based ``epoch``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return initial * 0.5 ** (epoch // halve_every)


def max_workers() -> int:
    """Worker cap from NEUROGEN_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("NEUROGEN_THREADS", "1")))
    except ValueError:
        return 1
