"""Target-network descriptions, flat parameter layout and functional forward.

An :class:`ArchSpec` is an immutable, validated list of layer descriptors.
Its :class:`ParamLayout` fixes where every trainable tensor lives inside the
flat vector ``w``; :func:`functional_forward` runs the network with ``w``
passed in as data, so gradients flow back to whatever produced ``w``.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from neurogen import gradcore as gc
from neurogen.gradcore import Tensor

PAD_ID = 256
TEXT_VOCAB = 257  # byte values plus padding

BUILTIN_KINDS = ("cnn3", "cnn2", "lenet", "mlp_text", "rnn_text", "mlp")
LAYER_KINDS = (
    "conv2d", "relu", "maxpool2d", "global_avg_pool", "flatten", "linear",
    "embedding_ref", "mean_pool_tokens", "rnn_vanilla", "take_last_hidden",
)


class ArchError(ValueError):
    """Shape inference failed or weights do not belong to the architecture."""


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int = 0  # conv out_channels / linear out_features
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    k: int = 0  # pooling window
    vocab: int = 0
    dim: int = 0
    hidden: int = 0
    frozen: bool = True

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        defaults = Layer(self.kind)
        for key, value in asdict(self).items():
            if key != "kind" and value != getattr(defaults, key):
                d[key] = value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Layer":
        return cls(**dict(d))


def conv(out, kernel=3, stride=1, padding=None):
    return Layer("conv2d", out=out, kernel=kernel, stride=stride,
                 padding=kernel // 2 if padding is None else padding)


@dataclass(frozen=True)
class Segment:
    layer: int
    role: str  # weight | recurrent | bias
    shape: tuple[int, ...]
    offset: int

    @property
    def length(self) -> int:
        return math.prod(self.shape)

    @property
    def stop(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class ParamLayout:
    segments: tuple[Segment, ...]

    @property
    def total_len(self) -> int:
        return self.segments[-1].stop if self.segments else 0

    def __iter__(self):
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)


def _layer_params(layer: Layer, in_shape: tuple[int, ...]) -> list[tuple[str, tuple[int, ...]]]:
    if layer.kind == "conv2d":
        return [("weight", (layer.out, in_shape[0], layer.kernel, layer.kernel)), ("bias", (layer.out,))]
    if layer.kind == "linear":
        return [("weight", (layer.out, in_shape[0])), ("bias", (layer.out,))]
    if layer.kind == "rnn_vanilla":
        return [("weight", (layer.hidden, in_shape[-1])), ("recurrent", (layer.hidden, layer.hidden)),
                ("bias", (layer.hidden,))]
    if layer.kind == "embedding_ref" and not layer.frozen:
        return [("weight", (layer.vocab, layer.dim))]
    return []


def _out_shape(layer: Layer, s: tuple[int, ...]) -> tuple[int, ...]:
    kind = layer.kind
    if kind == "conv2d":
        if len(s) != 3:
            raise ArchError(f"conv2d expects C×H×W, got {s}")
        h = (s[1] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        w = (s[2] + 2 * layer.padding - layer.kernel) // layer.stride + 1
        if h <= 0 or w <= 0 or layer.out <= 0:
            raise ArchError(f"conv2d output collapses to {layer.out}×{h}×{w} from {s}")
        return (layer.out, h, w)
    if kind == "relu":
        return s
    if kind == "maxpool2d":
        if len(s) != 3 or layer.k <= 0:
            raise ArchError(f"maxpool2d expects C×H×W, got {s}")
        h, w = s[1] // layer.k, s[2] // layer.k
        if h == 0 or w == 0:
            raise ArchError(f"pooled spatial size reaches zero ({s[1]}×{s[2]} with k={layer.k})")
        return (s[0], h, w)
    if kind == "global_avg_pool":
        if len(s) != 3:
            raise ArchError(f"global_avg_pool expects C×H×W, got {s}")
        return (s[0],)
    if kind == "flatten":
        return (math.prod(s),)
    if kind == "linear":
        if len(s) != 1 or layer.out <= 0:
            raise ArchError(f"linear expects a vector, got {s}")
        return (layer.out,)
    if kind == "embedding_ref":
        if len(s) != 1 or layer.vocab <= 0 or layer.dim <= 0:
            raise ArchError(f"embedding_ref expects a token sequence, got {s}")
        return (s[0], layer.dim)
    if kind == "mean_pool_tokens":
        if len(s) != 2:
            raise ArchError(f"mean_pool_tokens expects T×D, got {s}")
        return (s[1],)
    if kind == "rnn_vanilla":
        if len(s) != 2 or layer.hidden <= 0:
            raise ArchError(f"rnn_vanilla expects T×D, got {s}")
        return (s[0], layer.hidden)
    if kind == "take_last_hidden":
        if len(s) != 2:
            raise ArchError(f"take_last_hidden expects T×H, got {s}")
        return (s[1],)
    raise ArchError(f"unknown layer kind {kind!r}")


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, ...]
    num_classes: int
    layers: tuple[Layer, ...]
    layout: ParamLayout = field(init=False, compare=False, repr=False)
    shapes: tuple[tuple[int, ...], ...] = field(init=False, compare=False, repr=False)
    _hash: bytes = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.num_classes < 1:
            raise ArchError("num_classes must be positive")
        shapes = [self.input_shape]
        segments: list[Segment] = []
        offset = 0
        for i, layer in enumerate(self.layers):
            for role, shape in _layer_params(layer, shapes[-1]):
                seg = Segment(i, role, shape, offset)
                segments.append(seg)
                offset = seg.stop
            shapes.append(_out_shape(layer, shapes[-1]))
        if shapes[-1] != (self.num_classes,):
            raise ArchError(f"{self.name}: network ends in {shapes[-1]}, expected ({self.num_classes},)")
        object.__setattr__(self, "shapes", tuple(shapes))
        object.__setattr__(self, "layout", ParamLayout(tuple(segments)))
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        object.__setattr__(self, "_hash", hashlib.blake2b(blob, digest_size=8).digest())

    @property
    def modality(self) -> str:
        if any(l.kind == "embedding_ref" for l in self.layers):
            return "text"
        return "image" if len(self.input_shape) == 3 else "vector"

    @property
    def num_params(self) -> int:
        return self.layout.total_len

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "layers": [l.to_dict() for l in self.layers],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ArchSpec":
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]),
                   tuple(Layer.from_dict(l) for l in d["layers"]))

    @property
    def arch_hash(self) -> bytes:
        """8-byte blake2b of the canonical JSON form."""
        return self._hash

    @property
    def arch_id(self) -> str:
        return self.arch_hash.hex()


def builtin_arch(
    kind: str,
    input_shape: Sequence[int],
    num_classes: int,
    widths: Sequence[int] | None = None,
    hidden: int = 64,
    embed_dim: int = 32,
    vocab: int = TEXT_VOCAB,
) -> ArchSpec:
    """Build one of the stock target networks.

    ``widths`` sets conv channel counts for cnn3/cnn2 and is ignored
    elsewhere. LeNet follows the 6-16-120-84 recipe with a padded first
    convolution so 14×14 inputs survive both pooling stages.
    """
    input_shape = tuple(input_shape)
    if kind in ("cnn3", "cnn2"):
        depth = 3 if kind == "cnn3" else 2
        widths = tuple(widths or (8, 16, 32)[:depth])
        if len(widths) != depth:
            raise ArchError(f"{kind} needs {depth} channel widths, got {widths}")
        layers: list[Layer] = []
        for c in widths:
            layers += [conv(c, 3), Layer("relu"), Layer("maxpool2d", k=2)]
        layers += [Layer("global_avg_pool"), Layer("linear", out=num_classes)]
    elif kind == "lenet":
        layers = [
            conv(6, 5, padding=2), Layer("relu"), Layer("maxpool2d", k=2),
            conv(16, 5, padding=0), Layer("relu"), Layer("maxpool2d", k=2),
            Layer("flatten"),
            Layer("linear", out=120), Layer("relu"),
            Layer("linear", out=84), Layer("relu"),
            Layer("linear", out=num_classes),
        ]
    elif kind == "mlp_text":
        layers = [
            Layer("embedding_ref", vocab=vocab, dim=embed_dim, frozen=True),
            Layer("mean_pool_tokens"),
            Layer("linear", out=hidden), Layer("relu"),
            Layer("linear", out=num_classes),
        ]
    elif kind == "rnn_text":
        layers = [
            Layer("embedding_ref", vocab=vocab, dim=embed_dim, frozen=True),
            Layer("rnn_vanilla", hidden=hidden),
            Layer("take_last_hidden"),
            Layer("linear", out=num_classes),
        ]
    elif kind == "mlp":
        layers = [Layer("linear", out=hidden), Layer("relu"), Layer("linear", out=num_classes)]
    else:
        raise ArchError(f"unknown builtin architecture {kind!r}; choose from {BUILTIN_KINDS}")
    if kind in ("cnn3", "cnn2", "lenet") and len(input_shape) != 3:
        raise ArchError(f"{kind} needs a C×H×W input shape, got {input_shape}")
    if kind in ("mlp_text", "rnn_text", "mlp") and len(input_shape) != 1:
        raise ArchError(f"{kind} needs a 1-D input shape, got {input_shape}")
    return ArchSpec(kind, input_shape, num_classes, tuple(layers))


def embedding_table(vocab: int, dim: int, seed: int) -> Tensor:
    """Frozen token table drawn from N(0, 1/dim); the padding row is zero."""
    rng = np.random.default_rng([seed, 0xE3B])
    table = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(vocab, dim)).astype(np.float32)
    if vocab > PAD_ID:
        table[PAD_ID] = 0.0
    return Tensor(table)


# flat parameters -------------------------------------------------------------

@dataclass
class FlatParams:
    values: Tensor
    layout: ParamLayout
    arch_id: str

    def __post_init__(self):
        if not isinstance(self.values, Tensor):
            self.values = Tensor(np.asarray(self.values, dtype=np.float32))
        if self.values.data.ndim != 1 or self.values.shape[0] != self.layout.total_len:
            raise ArchError(
                f"flat vector has shape {self.values.shape}, layout needs ({self.layout.total_len},)"
            )

    @classmethod
    def zeros(cls, arch: ArchSpec, precision: str = "single") -> "FlatParams":
        return cls(Tensor(np.zeros(arch.num_params), precision=precision), arch.layout, arch.arch_id)

    def numpy(self) -> np.ndarray:
        return self.values.data

    def __len__(self) -> int:
        return self.layout.total_len

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values.data)))


def flatten(per_layer: Sequence, arch: ArchSpec) -> FlatParams:
    """Concatenate per-segment tensors (layout order) into one flat vector."""
    layout = arch.layout
    if len(per_layer) != len(layout):
        raise ArchError(f"expected {len(layout)} tensors, got {len(per_layer)}")
    parts = []
    for seg, t in zip(layout, per_layer):
        t = t if isinstance(t, Tensor) else Tensor(t)
        if tuple(t.shape) != seg.shape:
            raise ArchError(f"segment {seg.layer}.{seg.role}: shape {t.shape}, expected {seg.shape}")
        parts.append(gc.reshape(t, (seg.length,)))
    values = gc.concat(parts, axis=0) if parts else Tensor(np.zeros(0, dtype=np.float32))
    return FlatParams(values, layout, arch.arch_id)


def slice_params(flat: FlatParams) -> list[Tensor]:
    """Split a flat vector into per-segment tensors (differentiable views)."""
    out = []
    for seg in flat.layout:
        piece = gc.slice_view(flat.values, slice(seg.offset, seg.stop))
        out.append(gc.reshape(piece, seg.shape))
    return out


# functional forward -----------------------------------------------------------

def _as_batch(batch) -> np.ndarray | Tensor:
    return batch if isinstance(batch, Tensor) else np.asarray(batch)


def functional_forward(
    arch: ArchSpec,
    flat: FlatParams,
    batch,
    frozen_tables: Tensor | Mapping[int, Tensor] | None = None,
) -> Tensor:
    """Logits ``[batch, num_classes]`` of ``arch`` run with weights ``flat``."""
    if flat.arch_id != arch.arch_id:
        raise ArchError(f"weights belong to arch {flat.arch_id}, not {arch.arch_id} ({arch.name})")
    batch = _as_batch(batch)
    data = batch.data if isinstance(batch, Tensor) else batch
    if tuple(data.shape[1:]) != arch.input_shape:
        raise ArchError(f"batch shape {tuple(data.shape)} does not match input shape {arch.input_shape}")

    params = slice_params(flat)
    by_layer: dict[int, dict[str, Tensor]] = {}
    for seg, t in zip(flat.layout, params):
        by_layer.setdefault(seg.layer, {})[seg.role] = t

    dtype = flat.values.data.dtype
    x = batch if isinstance(batch, Tensor) else None
    if x is None and arch.modality != "text":
        x = Tensor(data.astype(dtype))
    ids = data if arch.modality == "text" else None
    mask = None if ids is None else (ids != PAD_ID)

    for i, layer in enumerate(arch.layers):
        p = by_layer.get(i, {})
        kind = layer.kind
        if kind == "conv2d":
            x = gc.conv2d(x, p["weight"], p["bias"], stride=layer.stride, padding=layer.padding)
        elif kind == "relu":
            x = gc.relu(x)
        elif kind == "maxpool2d":
            x = gc.maxpool2d(x, layer.k)
        elif kind == "global_avg_pool":
            x = gc.global_avg_pool(x)
        elif kind == "flatten":
            x = gc.reshape(x, (x.shape[0], -1))
        elif kind == "linear":
            x = gc.add(gc.matmul(x, p["weight"], transpose_b=True), p["bias"])
        elif kind == "embedding_ref":
            table = p.get("weight")
            if table is None:
                table = _frozen_table(frozen_tables, i)
                if table.data.dtype != dtype:
                    table = Tensor(table.data.astype(dtype))
            x = gc.embedding_lookup(table, ids)
        elif kind == "mean_pool_tokens":
            m = mask[..., None].astype(dtype)
            counts = np.maximum(m.sum(axis=1), 1.0)
            pooled = gc.sum_reduce(gc.mul(x, Tensor(np.broadcast_to(m, x.shape).copy())), axis=1)
            x = gc.mul(pooled, Tensor(np.broadcast_to(1.0 / counts, pooled.shape).copy()))
        elif kind == "rnn_vanilla":
            x = _rnn(x, p["weight"], p["recurrent"], p["bias"], mask, dtype)
        elif kind == "take_last_hidden":
            x = gc.slice_view(x, slice(None), -1, slice(None))
        else:  # pragma: no cover - guarded by ArchSpec validation
            raise ArchError(f"unknown layer kind {kind!r}")
    return x


def _frozen_table(frozen_tables, index: int) -> Tensor:
    if frozen_tables is None:
        raise ArchError(f"layer {index} needs a frozen embedding table")
    if isinstance(frozen_tables, Tensor):
        return frozen_tables
    return frozen_tables[index]


def _rnn(x: Tensor, w_in: Tensor, w_rec: Tensor, bias: Tensor, mask, dtype) -> Tensor:
    """tanh recurrence; padded steps carry the previous state forward."""
    batch, steps, _ = x.shape
    hidden = w_in.shape[0]
    h = Tensor(np.zeros((batch, hidden), dtype=dtype))
    states = []
    for t in range(steps):
        xt = gc.slice_view(x, slice(None), t, slice(None))
        pre = gc.add(gc.add(gc.matmul(xt, w_in, transpose_b=True),
                            gc.matmul(h, w_rec, transpose_b=True)), bias)
        h_new = gc.tanh(pre)
        if mask is None or mask[:, t].all():
            h = h_new
        else:
            keep = np.broadcast_to(mask[:, t, None].astype(dtype), (batch, hidden)).copy()
            h = gc.add(gc.mul(h_new, Tensor(keep)), gc.mul(h, Tensor(1 - keep)))
        states.append(gc.reshape(h, (batch, 1, hidden)))
    return gc.concat(states, axis=1)


def predict(arch: ArchSpec, flat: FlatParams, inputs, frozen_tables=None, batch_size: int = 512) -> np.ndarray:
    """Argmax class per input; ties resolve to the lowest class index."""
    inputs = np.asarray(inputs)
    preds = []
    for start in range(0, len(inputs), batch_size):
        logits = functional_forward(arch, flat, inputs[start:start + batch_size], frozen_tables)
        preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=int)


def accuracy(arch: ArchSpec, flat: FlatParams, inputs, labels, frozen_tables=None) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return 0.0
    return float(np.mean(predict(arch, flat, inputs, frozen_tables) == labels))


# NGPW weights file ---------------------------------------------------------------

NGPW_MAGIC = b"NGPWv001"


def write_weights(path, flat: FlatParams, arch: ArchSpec) -> None:
    if flat.arch_id != arch.arch_id:
        raise ArchError("weights do not belong to the given architecture")
    values = np.ascontiguousarray(flat.values.data, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(NGPW_MAGIC)
        fh.write(arch.arch_hash)
        fh.write(struct.pack("<Q", values.size))
        fh.write(values.tobytes())


def read_weights(path, arch: ArchSpec) -> FlatParams:
    raw = Path(path).read_bytes()
    if raw[:8] != NGPW_MAGIC:
        raise ArchError(f"{path}: bad magic {raw[:8]!r}")
    if raw[8:16] != arch.arch_hash:
        raise ArchError(f"{path}: arch hash {raw[8:16].hex()} does not match {arch.arch_id}")
    (n,) = struct.unpack("<Q", raw[16:24])
    if n != arch.num_params or len(raw) != 24 + 4 * n:
        raise ArchError(f"{path}: holds {n} values, arch needs {arch.num_params}")
    values = np.frombuffer(raw, dtype="<f4", count=n, offset=24).astype(np.float32)
    return FlatParams(Tensor(values), arch.layout, arch.arch_id)
