import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from neurogen import gradcore as gc
from neurogen.archspec import (
    BUILTIN_KINDS,
    PAD_ID,
    ArchError,
    ArchSpec,
    FlatParams,
    Layer,
    accuracy,
    builtin_arch,
    embedding_table,
    flatten,
    functional_forward,
    predict,
    read_weights,
    slice_params,
    write_weights,
)
from neurogen.gradcore import GradTape, Tensor, backward, grad_check
from neurogen.refcorpus import ReferenceNet

IMAGE = (1, 14, 14)


def _arch(kind, **kw):
    if kind in ("cnn3", "cnn2", "lenet"):
        return builtin_arch(kind, IMAGE, 10, **kw)
    if kind in ("mlp_text", "rnn_text"):
        return builtin_arch(kind, (12,), 4, **kw)
    return builtin_arch(kind, (8,), 3, **kw)


def _inputs(arch, n, rng):
    if arch.modality == "text":
        ids = rng.integers(0, 256, size=(n,) + arch.input_shape)
        # ragged tails of padding, at least one real token per row
        lengths = rng.integers(1, arch.input_shape[0] + 1, size=n)
        for i, L in enumerate(lengths):
            ids[i, L:] = PAD_ID
        return ids
    return rng.normal(size=(n,) + arch.input_shape)


def _tables(arch):
    return {i: embedding_table(l.vocab, l.dim, seed=1) for i, l in enumerate(arch.layers)
            if l.kind == "embedding_ref"}


def _count_params(kind, widths=(8, 16, 32), hidden=64, embed_dim=32, classes=10, in_dim=8):
    """Hand count, written independently of the layout code."""
    if kind in ("cnn3", "cnn2"):
        chans = [1] + list(widths[: 3 if kind == "cnn3" else 2])
        convs = sum(co * ci * 9 + co for ci, co in zip(chans, chans[1:]))
        return convs + chans[-1] * classes + classes
    if kind == "lenet":
        # 14 -> pad2 conv5 -> 14 -> pool 7 -> conv5 -> 3 -> pool 1
        return (6 * 25 + 6) + (16 * 6 * 25 + 16) + (16 * 120 + 120) + (120 * 84 + 84) + (84 * classes + classes)
    if kind == "mlp_text":
        return embed_dim * hidden + hidden + hidden * classes + classes
    if kind == "rnn_text":
        return hidden * embed_dim + hidden * hidden + hidden + hidden * classes + classes
    if kind == "mlp":
        return in_dim * hidden + hidden + hidden * classes + classes
    raise ValueError(kind)


# sizes and layout --------------------------------------------------------------

def test_cnn3_param_count_matches_counting_oracle():
    arch = builtin_arch("cnn3", IMAGE, 10, widths=(8, 16, 32))
    assert arch.num_params == _count_params("cnn3") == 6218


def test_cnn3_leading_offsets():
    segs = list(builtin_arch("cnn3", IMAGE, 10).layout)
    assert (segs[0].role, segs[0].offset, segs[0].stop) == ("weight", 0, 72)
    assert (segs[1].role, segs[1].offset, segs[1].stop) == ("bias", 72, 80)


def test_mlp_text_count_excludes_frozen_embedding():
    arch = builtin_arch("mlp_text", (16,), 4, hidden=64, embed_dim=32)
    assert arch.num_params == 2372 == _count_params("mlp_text", classes=4)


@pytest.mark.parametrize("kind", ["cnn2", "lenet", "rnn_text", "mlp"])
def test_other_builtin_counts(kind):
    classes = {"cnn2": 10, "lenet": 10, "rnn_text": 4, "mlp": 3}[kind]
    assert _arch(kind).num_params == _count_params(kind, classes=classes)


def test_cnn2_is_cnn3_minus_last_block():
    big, small = _arch("cnn3").layers, _arch("cnn2").layers
    assert small[:6] == big[:6]
    assert small[6:] == big[9:]


@pytest.mark.parametrize("kind", BUILTIN_KINDS)
def test_layout_is_contiguous_and_covers(kind):
    arch = _arch(kind)
    pos = 0
    for seg in arch.layout:
        assert seg.offset == pos
        assert seg.length == int(np.prod(seg.shape))
        pos = seg.stop
    assert pos == arch.layout.total_len == arch.num_params


def test_rnn_layout_orders_input_recurrent_bias():
    arch = _arch("rnn_text")
    roles = [s.role for s in arch.layout if s.layer == 1]
    assert roles == ["weight", "recurrent", "bias"]


def test_pooling_to_zero_is_rejected():
    with pytest.raises(ArchError):
        builtin_arch("cnn3", (1, 4, 4), 10)


def test_wrong_input_rank_is_rejected():
    with pytest.raises(ArchError):
        builtin_arch("cnn3", (14, 14), 10)
    with pytest.raises(ArchError):
        builtin_arch("bogus", (8,), 3)


def test_arch_dict_round_trip_and_hash():
    arch = _arch("lenet")
    again = ArchSpec.from_dict(arch.to_dict())
    assert again == arch and again.arch_hash == arch.arch_hash
    assert len(arch.arch_hash) == 8
    assert _arch("cnn2").arch_hash != arch.arch_hash


# flatten / slice ---------------------------------------------------------------

@pytest.mark.parametrize("kind", BUILTIN_KINDS)
def test_flatten_slice_round_trip_bit_exact(kind):
    arch = _arch(kind)
    w = np.random.default_rng(0).normal(size=arch.num_params).astype(np.float32)
    flat = FlatParams(Tensor(w), arch.layout, arch.arch_id)
    again = flatten(slice_params(flat), arch)
    assert again.values.data.tobytes() == w.tobytes()
    pieces = [np.random.default_rng(1).normal(size=s.shape).astype(np.float32) for s in arch.layout]
    for a, b in zip(slice_params(flatten(pieces, arch)), pieces):
        assert a.data.tobytes() == b.tobytes()


def test_slice_of_zeros_is_zero():
    for t in slice_params(FlatParams.zeros(_arch("cnn3"))):
        assert not t.data.any()


def test_flatten_reports_offending_segment():
    arch = _arch("mlp")
    pieces = [np.zeros(s.shape) for s in arch.layout]
    pieces[2] = np.zeros((2, 2))
    with pytest.raises(ArchError, match="segment 2.weight"):
        flatten(pieces, arch)


def test_flat_length_mismatch():
    arch = _arch("mlp")
    with pytest.raises(ArchError):
        FlatParams(Tensor(np.zeros(arch.num_params + 1)), arch.layout, arch.arch_id)


# functional forward ----------------------------------------------------------------

@pytest.mark.parametrize("kind", BUILTIN_KINDS)
def test_functional_forward_matches_reference_module(kind):
    arch = _arch(kind)
    tables = _tables(arch)
    net = ReferenceNet(arch, tables or None, seed=3).double()
    flat = net.to_flat()
    flat64 = FlatParams(Tensor(flat.values.data.astype(np.float64)), flat.layout, flat.arch_id)
    x = _inputs(arch, 100, np.random.default_rng(4))
    tables64 = {i: Tensor(t.data.astype(np.float64)) for i, t in tables.items()}
    ours = functional_forward(arch, flat64, x, tables64 or None).data
    xt = torch.from_numpy(x).long() if arch.modality == "text" else torch.from_numpy(x)
    with torch.no_grad():
        ref = net(xt).numpy()
    assert ours.shape == (100, arch.num_classes)
    assert np.abs(ours - ref).max() < 1e-6


@pytest.mark.parametrize("kind", BUILTIN_KINDS)
def test_zero_weights_give_uniform_softmax(kind):
    arch = _arch(kind)
    x = _inputs(arch, 5, np.random.default_rng(0))
    logits = functional_forward(arch, FlatParams.zeros(arch), x, _tables(arch) or None)
    probs = gc.softmax(logits).data
    np.testing.assert_allclose(probs, 1.0 / arch.num_classes, atol=1e-7)
    assert (predict(arch, FlatParams.zeros(arch), x, _tables(arch) or None) == 0).all()


def test_rnn_with_zero_weights_ends_at_tanh_bias():
    arch = builtin_arch("rnn_text", (10,), 4, hidden=6, embed_dim=5)
    rng = np.random.default_rng(2)
    b = rng.normal(size=6)
    pieces = [np.zeros(s.shape) for s in arch.layout]
    roles = [(s.layer, s.role) for s in arch.layout]
    pieces[roles.index((1, "bias"))] = b
    # identity read-out: logits_j = h_j for j < 4
    pieces[roles.index((3, "weight"))] = np.eye(4, 6)
    flat = flatten([p.astype(np.float64) for p in pieces], arch)
    x = _inputs(arch, 7, rng)
    logits = functional_forward(arch, flat, x, _tables(arch)).data
    np.testing.assert_allclose(logits, np.broadcast_to(np.tanh(b[:4]), (7, 4)), rtol=1e-12)


def test_mean_pool_ignores_padding():
    arch = builtin_arch("mlp_text", (6,), 4, hidden=8, embed_dim=5)
    tables = _tables(arch)
    w = FlatParams(Tensor(np.random.default_rng(0).normal(size=arch.num_params)), arch.layout, arch.arch_id)
    a = np.array([[65, 66, PAD_ID, PAD_ID, PAD_ID, PAD_ID]])
    b = np.array([[65, 66, 65, 66, PAD_ID, PAD_ID]])
    np.testing.assert_allclose(functional_forward(arch, w, a, tables).data,
                               functional_forward(arch, w, b, tables).data, atol=1e-6)


@pytest.mark.parametrize("kind", ["cnn2", "lenet", "mlp", "mlp_text", "rnn_text"])
def test_functional_forward_grad_check_miniature(kind):
    if kind == "cnn2":
        arch = builtin_arch("cnn2", (1, 4, 4), 2, widths=(2, 3))
    elif kind == "lenet":
        arch = ArchSpec("mini", (1, 6, 6), 2, (Layer("conv2d", out=2, kernel=3, padding=1), Layer("relu"),
                                               Layer("maxpool2d", k=2), Layer("flatten"), Layer("linear", out=2)))
    elif kind == "mlp":
        arch = builtin_arch("mlp", (3,), 2, hidden=4)
    else:
        arch = builtin_arch(kind, (5,), 2, hidden=3, embed_dim=4)
    rng = np.random.default_rng(5)
    x = _inputs(arch, 3, rng)
    y = rng.integers(0, 2, size=3)
    tables = {i: Tensor(t.data.astype(np.float64)) for i, t in _tables(arch).items()} or None
    w0 = rng.normal(scale=0.5, size=arch.num_params)

    def loss(w):
        flat = FlatParams(w, arch.layout, arch.arch_id)
        return gc.cross_entropy(functional_forward(arch, flat, x, tables), y)

    assert grad_check(loss, w0) < 1e-4


def test_frozen_table_gets_no_gradient():
    arch = builtin_arch("mlp_text", (6,), 4, hidden=8, embed_dim=5)
    table = embedding_table(257, 5, seed=0)
    before = table.data.copy()
    flat = FlatParams(Tensor(np.random.default_rng(0).normal(size=arch.num_params).astype(np.float32),
                             requires_grad=True), arch.layout, arch.arch_id)
    x = _inputs(arch, 4, np.random.default_rng(1))
    with GradTape() as tape:
        loss = gc.cross_entropy(functional_forward(arch, flat, x, table), np.array([0, 1, 2, 3]))
    grads = backward(loss, tape, wrt=[flat.values, table])
    assert not grads[table].any()
    assert grads[flat.values].any()
    assert table.data.tobytes() == before.tobytes()


def test_embedding_table_pad_row_zero_and_seeded():
    t = embedding_table(257, 16, seed=3)
    assert not t.data[PAD_ID].any()
    np.testing.assert_array_equal(t.data, embedding_table(257, 16, seed=3).data)
    assert abs(t.data[:256].std() - 0.25) < 0.02


def test_forward_rejects_mismatches():
    arch = _arch("mlp")
    with pytest.raises(ArchError):
        functional_forward(arch, FlatParams.zeros(_arch("cnn2")), np.zeros((2, 8)))
    with pytest.raises(ArchError):
        functional_forward(arch, FlatParams.zeros(arch), np.zeros((2, 9)))


def test_accuracy_of_zero_weights_is_class0_prior():
    arch = _arch("mlp")
    y = np.array([0, 1, 2] * 10)
    x = np.random.default_rng(0).normal(size=(30, 8))
    assert accuracy(arch, FlatParams.zeros(arch), x, y) == pytest.approx(1 / 3)


# NGPW ----------------------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(st.sampled_from(BUILTIN_KINDS), st.integers(0, 2**31 - 1))
def test_weights_file_round_trip(tmp_path_factory, kind, seed):
    arch = _arch(kind)
    w = np.random.default_rng(seed).normal(size=arch.num_params).astype(np.float32)
    path = tmp_path_factory.mktemp("w") / "w.ngpw"
    write_weights(path, FlatParams(Tensor(w), arch.layout, arch.arch_id), arch)
    raw = path.read_bytes()
    assert raw[:8] == b"NGPWv001" and raw[8:16] == arch.arch_hash
    assert int.from_bytes(raw[16:24], "little") == arch.num_params
    assert len(raw) == 24 + 4 * arch.num_params
    assert read_weights(path, arch).values.data.tobytes() == w.tobytes()


def test_weights_file_rejects_other_arch(tmp_path):
    path = tmp_path / "w.ngpw"
    write_weights(path, FlatParams.zeros(_arch("cnn3")), _arch("cnn3"))
    with pytest.raises(ArchError, match="hash"):
        read_weights(path, _arch("cnn2"))
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(ArchError):
        read_weights(path, _arch("cnn3"))
