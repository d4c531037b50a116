import numpy as np
import pytest

from neurogen.archspec import builtin_arch
from neurogen.dataio import synth_blobs
from neurogen.generator import GeneratorConfig

MINI = GeneratorConfig(d_model=16, n_layers=2, n_heads=2, max_seq_len=256, lora_rank=4, lora_scale=8.0)


@pytest.fixture
def mini_config():
    return MINI


@pytest.fixture(scope="session")
def mini_arch():
    # |w| = 4*16 + 16 + 16*3 + 3 = 131
    return builtin_arch("mlp", (4,), 3, hidden=16)


@pytest.fixture(scope="session")
def mini_blobs():
    return synth_blobs(k=3, n_per_class=40, dim=4, separation=6.0, seed=0)


def randomize(gen, seed=0, scale=0.1):
    """Give every trainable tensor (including the zero-initialized ones) random values."""
    rng = np.random.default_rng(seed)
    for t in gen.trainable().values():
        t.data[...] = rng.normal(scale=scale, size=t.shape).astype(t.data.dtype)
    return gen


# acceptance verdicts are collected here and echoed after the run -------------------

ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
