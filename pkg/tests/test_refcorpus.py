import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from neurogen.archspec import ArchError, FlatParams, accuracy, builtin_arch, embedding_table
from neurogen.dataio import synth_blobs
from neurogen.gradcore import Tensor
from neurogen.refcorpus import (
    CheckpointCorpus,
    CheckpointMeta,
    RefTrainConfig,
    ReferenceNet,
    TrainingDivergedError,
    build_corpus,
    corpus_stats,
    evaluate,
    peek_corpus_hash,
    read_corpus,
    train_reference,
    write_corpus,
)

FAST = RefTrainConfig(epochs=5, lr=0.05)


@pytest.fixture(scope="module")
def blobs():
    return synth_blobs(k=3, n_per_class=200, dim=8, separation=6.0, seed=0)


@pytest.fixture(scope="module")
def mlp():
    return builtin_arch("mlp", (8,), 3)


@pytest.fixture(scope="module")
def corpus(mlp, blobs):
    return build_corpus(mlp, blobs, N=8, base_seed=0, config=RefTrainConfig(epochs=30), workers=1)


def test_training_is_deterministic(mlp, blobs):
    a, ma = train_reference(mlp, blobs, 3, FAST)
    b, mb = train_reference(mlp, blobs, 3, FAST)
    assert a.values.data.tobytes() == b.values.data.tobytes()
    assert ma == mb
    c, _ = train_reference(mlp, blobs, 4, FAST)
    assert c.values.data.tobytes() != a.values.data.tobytes()


def test_corpus_entries_all_accurate(corpus):
    assert corpus.N == 8
    assert [m.seed for _, m in corpus.entries] == list(range(8))
    assert all(m.test_accuracy >= 0.9 for _, m in corpus.entries)
    assert all(f.finite for f, _ in corpus.entries)


def test_reported_accuracy_matches_functional_forward(corpus, mlp, blobs):
    flat, meta = corpus.entries[0]
    assert accuracy(mlp, flat, blobs.test.x, blobs.test.y) == pytest.approx(meta.test_accuracy)


def test_curve_has_one_row_per_epoch(mlp, blobs):
    curve = []
    train_reference(mlp, blobs, 0, FAST, curve=curve)
    assert [r[0] for r in curve] == list(range(5))
    assert [r[3] for r in curve] == [0.05] * 5


def test_divergence_raises(mlp, blobs):
    with pytest.raises(TrainingDivergedError) as info:
        train_reference(mlp, blobs, 0, RefTrainConfig(epochs=3, lr=1e6))
    assert info.value.seed == 0


def test_text_reference_uses_shared_frozen_table():
    arch = builtin_arch("mlp_text", (8,), 2, hidden=8, embed_dim=4)
    table = embedding_table(257, 4, seed=0)
    net = ReferenceNet(arch, {0: table}, seed=0)
    assert np.array_equal(net.table0.numpy(), table.data)
    assert sum(p.numel() for p in net.parameters()) == arch.num_params


def test_reference_init_bounds(mlp):
    flat = ReferenceNet(mlp, seed=0).to_flat()
    first = flat.values.data[:64 * 8]
    assert np.abs(first).max() <= 1 / np.sqrt(8)


def test_meta_validation():
    with pytest.raises(ValueError):
        CheckpointMeta(0, 10, 0.1, 1.5, "d")
    with pytest.raises(ValueError):
        CheckpointMeta(0, 0, 0.1, 0.5, "d")


def test_dataset_arch_mismatch(blobs):
    with pytest.raises(ArchError):
        train_reference(builtin_arch("mlp", (4,), 3), blobs, 0, FAST)


# statistics -------------------------------------------------------------------

def test_corpus_stats_against_statistics_module(corpus):
    mean, var = corpus_stats(corpus)
    m = corpus.matrix().astype(np.float64)
    for j in (0, 17, m.shape[1] - 1):
        col = m[:, j].tolist()
        assert mean[j] == pytest.approx(statistics.fmean(col), rel=1e-12, abs=1e-15)
        assert var[j] == pytest.approx(statistics.pvariance(col), rel=1e-9, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, st.tuples(st.integers(1, 6), st.just(771)),
                  elements=st.floats(-10, 10, width=32)))
def test_corpus_stats_properties(mlp, values):
    corpus = CheckpointCorpus(mlp, [(FlatParams(Tensor(v), mlp.layout, mlp.arch_id),
                                     CheckpointMeta(i, 1, 0.0, 0.5, "x")) for i, v in enumerate(values)])
    mean, var = corpus_stats(corpus)
    assert (var >= 0).all()
    assert (mean >= values.min(axis=0) - 1e-6).all() and (mean <= values.max(axis=0) + 1e-6).all()
    if len(values) == 1:
        assert not var.any()


# NGPC -----------------------------------------------------------------------------

def test_corpus_file_round_trip(tmp_path, corpus, mlp):
    p = tmp_path / "c.ngpc"
    write_corpus(p, corpus)
    back = read_corpus(p, mlp)
    assert back.N == corpus.N
    for (a, ma), (b, mb) in zip(corpus.entries, back.entries):
        assert a.values.data.tobytes() == b.values.data.tobytes()
        assert ma == mb
    assert peek_corpus_hash(p) == mlp.arch_hash
    raw = p.read_bytes()
    assert raw[:8] == b"NGPCv001"
    assert int.from_bytes(raw[16:24], "little") == 8
    assert int.from_bytes(raw[24:32], "little") == mlp.num_params


def test_rebuilt_corpus_is_byte_identical(tmp_path, mlp, blobs):
    paths = []
    for i in range(2):
        c = build_corpus(mlp, blobs, N=2, base_seed=5, config=FAST, workers=1)
        paths.append(tmp_path / f"c{i}.ngpc")
        write_corpus(paths[-1], c)
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_corpus_file_rejects_other_arch_and_trailing_bytes(tmp_path, corpus):
    p = tmp_path / "c.ngpc"
    write_corpus(p, corpus)
    with pytest.raises(ArchError, match="hash"):
        read_corpus(p, builtin_arch("mlp", (8,), 4))
    p.write_bytes(p.read_bytes() + b"\0")
    with pytest.raises(ArchError, match="trailing"):
        read_corpus(p, corpus.arch)


def test_corpus_rejects_mixed_arch(mlp):
    other = builtin_arch("mlp", (8,), 4)
    with pytest.raises(ArchError):
        CheckpointCorpus(mlp, [(FlatParams.zeros(other), CheckpointMeta(0, 1, 0.0, 0.5, "x"))])
