"""Conditioned decoder that emits the flat weight vector of a target network.

The sequence fed to the decoder is ``[instruction; context; special tokens]``.
Under the causal mask the special-token rows come last, so their hidden
states see the whole instruction and context. Each of those ``d1`` hidden
states is mapped by a shared two-layer head to a chunk of ``d_model``
parameters; the chunks are concatenated row-major and cut to ``|w|``.

Only the special tokens, the LoRA factors and the head/encoders train; the
decoder base is seeded, frozen and stored read-only.
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from neurogen import gradcore as gc
from neurogen.archspec import PAD_ID, ArchError, ArchSpec, FlatParams
from neurogen.gradcore import Tensor
from neurogen.rng import stream

GEN_VOCAB = 258  # bytes, PAD_ID (256), one spare special
STAGE1_INSTRUCTION = "Please help generate parameters of neural networks."
_TEMPLATE = ("Please help generate parameters of the [{arch}] neural network to conduct "
             "the {task} task with the [{dataset}] data samples.")
_TEMPLATE_RE = re.compile(
    r"^Please help generate parameters of the \[[^\]]+\] neural network to conduct "
    r"the .+ task with the \[[^\]]+\] data samples\.$"
)


class GeneratorError(ValueError):
    pass


def stage2_instruction(arch_name: str, dataset_name: str, task: str = "classification") -> str:
    return _TEMPLATE.format(arch=arch_name, task=task, dataset=dataset_name)


def follows_template(text: str) -> bool:
    return bool(_TEMPLATE_RE.match(text))


def tokenize(text: str, max_len: int | None = None) -> np.ndarray:
    """UTF-8 bytes as token ids."""
    if not text:
        raise GeneratorError("empty instruction")
    ids = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
    if max_len is not None and ids.size > max_len:
        raise GeneratorError(f"instruction needs {ids.size} tokens, limit is {max_len}")
    return ids


def detokenize(ids) -> str:
    return bytes(int(i) for i in ids if int(i) < 256).decode("utf-8")


@dataclass(frozen=True)
class GeneratorConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_seq_len: int = 1024
    vocab: int = GEN_VOCAB
    lora_rank: int = 8
    lora_scale: float = 16.0
    patch_size: int = 7
    mlp_ratio: int = 4
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise GeneratorError("d_model must be divisible by n_heads")
        if self.lora_rank < 1:
            raise GeneratorError("lora_rank must be >= 1")
        if self.vocab < 257:
            raise GeneratorError("vocab must cover bytes and padding")


def _normal(rng, shape, std):
    return (rng.normal(size=shape) * std).astype(np.float32)


def _frozen(array: np.ndarray) -> Tensor:
    t = Tensor(array)
    t.data.setflags(write=False)
    return t


def _init_base(cfg: GeneratorConfig) -> OrderedDict:
    rng = stream(cfg.seed, "generator-base")
    d, hid, std = cfg.d_model, cfg.d_model * cfg.mlp_ratio, cfg.init_std
    resid_std = std / math.sqrt(2 * cfg.n_layers)
    base = OrderedDict()
    base["tok_emb"] = _normal(rng, (cfg.vocab, d), std)
    base["pos_emb"] = _normal(rng, (cfg.max_seq_len, d), std)
    for b in range(cfg.n_layers):
        p = f"blocks.{b}."
        base[p + "ln1_g"] = np.ones(d, np.float32)
        base[p + "ln1_b"] = np.zeros(d, np.float32)
        for name in ("wq", "wk", "wv"):
            base[p + name] = _normal(rng, (d, d), std)
        base[p + "wo"] = _normal(rng, (d, d), resid_std)
        base[p + "ln2_g"] = np.ones(d, np.float32)
        base[p + "ln2_b"] = np.zeros(d, np.float32)
        base[p + "w1"] = _normal(rng, (hid, d), std)
        base[p + "b1"] = np.zeros(hid, np.float32)
        base[p + "w2"] = _normal(rng, (d, hid), resid_std)
        base[p + "b2"] = np.zeros(d, np.float32)
    base["lnf_g"] = np.ones(d, np.float32)
    base["lnf_b"] = np.zeros(d, np.float32)
    return OrderedDict((k, _frozen(v)) for k, v in base.items())


def _encoder_shape(arch: ArchSpec, cfg: GeneratorConfig) -> tuple[int, ...] | None:
    """Input width of the learnable context encoder, or None for text."""
    if arch.modality == "image":
        c, h, w = arch.input_shape
        p = cfg.patch_size
        if h % p or w % p:
            raise GeneratorError(f"image {h}×{w} is not divisible into {p}×{p} patches")
        return (c * p * p,)
    if arch.modality == "vector":
        return (arch.input_shape[0],)
    return None


class GeneratorState:
    """Frozen decoder base plus the learnable triple (P, LoRA, head/encoders)."""

    def __init__(self, config: GeneratorConfig, arch: ArchSpec, *, head_init: str = "zero",
                 _empty: bool = False):
        self.config = config
        self.arch = arch
        self.d1 = math.ceil(arch.num_params / config.d_model)
        self.base: OrderedDict[str, Tensor] = OrderedDict()
        self.P: Tensor | None = None
        self.lora: OrderedDict[str, Tensor] = OrderedDict()
        self.theta: OrderedDict[str, Tensor] = OrderedDict()
        if _empty:
            return
        self.base = _init_base(config)
        rng = stream(config.seed, "generator-trainable")
        d, r, std = config.d_model, config.lora_rank, config.init_std
        self.P = Tensor(_normal(rng, (self.d1, d), std), requires_grad=True)
        for b in range(config.n_layers):
            for proj in ("q", "v"):
                self.lora[f"blocks.{b}.{proj}_A"] = Tensor(_normal(rng, (r, d), std), requires_grad=True)
                self.lora[f"blocks.{b}.{proj}_B"] = Tensor(np.zeros((d, r), np.float32), requires_grad=True)
        self.theta.update(self._fresh_head(rng, head_init))
        enc = _encoder_shape(arch, config)
        if enc is not None:
            self.theta["enc_w"] = Tensor(_normal(rng, (d, enc[0]), std), requires_grad=True)
            self.theta["enc_b"] = Tensor(np.zeros(d, np.float32), requires_grad=True)

    def _fresh_head(self, rng, init: str = "zero") -> OrderedDict:
        """``"zero"``: N(0, std²) hidden layer, zero final layer, so w_g = 0 at start.
        ``"uniform"``: both layers U(±1/sqrt(d)), the usual dense-layer default;
        emits small random weights instead of the all-zero saddle point.
        """
        d, std = self.config.d_model, self.config.init_std
        head = OrderedDict()
        if init == "zero":
            w1 = _normal(rng, (d, d), std)
            w2 = np.zeros((d, d), np.float32)
        elif init == "uniform":
            bound = 1.0 / math.sqrt(d)
            w1 = rng.uniform(-bound, bound, (d, d)).astype(np.float32)
            w2 = rng.uniform(-bound, bound, (d, d)).astype(np.float32)
        else:
            raise GeneratorError(f"unknown head init {init!r}")
        head["head_w1"] = Tensor(w1, requires_grad=True)
        head["head_b1"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
        head["head_w2"] = Tensor(w2, requires_grad=True)
        head["head_b2"] = Tensor(np.zeros(d, np.float32), requires_grad=True)
        return head

    # parameter access -----------------------------------------------------

    def trainable(self) -> OrderedDict[str, Tensor]:
        out = OrderedDict([("P", self.P)])
        out.update(self.lora)
        out.update(self.theta)
        return out

    def num_trainable(self) -> int:
        return sum(t.data.size for t in self.trainable().values())

    def astype(self, precision: str) -> "GeneratorState":
        """Deep copy in ``"single"`` or ``"double"`` precision."""
        dtype = np.float64 if precision == "double" else np.float32
        other = GeneratorState(self.config, self.arch, _empty=True)
        other.base = OrderedDict((k, _frozen(v.data.astype(dtype))) for k, v in self.base.items())
        other.P = Tensor(self.P.data.astype(dtype), requires_grad=True)
        other.lora = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.lora.items())
        other.theta = OrderedDict((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in self.theta.items())
        return other

    def copy(self) -> "GeneratorState":
        return self.astype(self.P.precision)

    @property
    def modality(self) -> str:
        return self.arch.modality

    def retarget(self, arch: ArchSpec, seed: int = 0, head_init: str = "uniform") -> "GeneratorState":
        """Generator for a different target: fresh projection head, resized special tokens.

        LoRA factors and the context encoder carry over; the first
        ``min(d1, d1')`` special-token rows are reused. The default head init
        is non-zero because a zero final layer pins the new target at w = 0,
        where only output biases receive gradient.
        """
        if arch.arch_id == self.arch.arch_id:
            raise GeneratorError("retarget needs a different architecture")
        if arch.modality != self.arch.modality or _encoder_shape(arch, self.config) != _encoder_shape(self.arch, self.config):
            raise GeneratorError("retargeting across input modalities is not supported")
        other = self.copy()
        other.arch = arch
        other.d1 = math.ceil(arch.num_params / self.config.d_model)
        rng = stream(seed, "retarget")
        keep = min(self.d1, other.d1)
        rows = _normal(rng, (other.d1, self.config.d_model), self.config.init_std).astype(self.P.data.dtype)
        rows[:keep] = self.P.data[:keep]
        other.P = Tensor(rows, requires_grad=True)
        head = self._fresh_head(rng, head_init)
        for k, v in head.items():
            other.theta[k] = Tensor(v.data.astype(self.P.data.dtype), requires_grad=True)
        return other


def trainable_parameters(gen: GeneratorState) -> OrderedDict[str, Tensor]:
    return gen.trainable()


# context encoding -----------------------------------------------------------

def image_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """``[m, C, H, W]`` -> ``[m * (H/p) * (W/p), C*p*p]`` in batch-major, row-major patch order."""
    m, c, h, w = images.shape
    if h % patch or w % patch:
        raise GeneratorError(f"image {h}×{w} is not divisible into {patch}×{patch} patches")
    x = images.reshape(m, c, h // patch, patch, w // patch, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(m * (h // patch) * (w // patch), c * patch * patch)


def encode_context(gen: GeneratorState, batch, modality: str | None = None) -> Tensor:
    """Embed task inputs (labels are never encoded) as ``[n, d_model]`` rows in batch order."""
    modality = modality or gen.modality
    batch = np.asarray(batch)
    if len(batch) < 1:
        raise GeneratorError("context batch is empty")
    dtype = gen.P.data.dtype
    if modality != gen.modality:
        raise GeneratorError(f"generator encodes {gen.modality} context, got {modality}")
    if tuple(batch.shape[1:]) != gen.arch.input_shape:
        raise GeneratorError(f"context samples have shape {batch.shape[1:]}, expected {gen.arch.input_shape}")
    if modality == "image":
        rows = Tensor(image_patches(batch, gen.config.patch_size).astype(dtype))
    elif modality == "vector":
        rows = Tensor(batch.astype(dtype))
    elif modality == "text":
        table = gen.base["tok_emb"].data
        mask = (batch != PAD_ID)[..., None]
        summed = (table[batch] * mask).sum(axis=1)
        counts = np.maximum(mask.sum(axis=1), 1)
        return Tensor((summed / counts).astype(dtype))
    else:
        raise GeneratorError(f"unknown modality {modality!r}")
    return gc.add(gc.matmul(rows, gen.theta["enc_w"], transpose_b=True), gen.theta["enc_b"])


# decoding -------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceLayout:
    instruction: range
    context: range
    special: range

    @property
    def length(self) -> int:
        return self.special.stop


def sequence_layout(n_instruction: int, n_context: int, d1: int) -> SequenceLayout:
    a, b = n_instruction, n_instruction + n_context
    return SequenceLayout(range(0, a), range(a, b), range(b, b + d1))


def attention_mask(layout: SequenceLayout) -> np.ndarray:
    return gc.causal_mask(layout.length)


def _linear(x, w, b=None):
    y = gc.matmul(x, w, transpose_b=True)
    return y if b is None else gc.add(y, b)


def decode(gen: GeneratorState, x: Tensor, use_lora: bool = True) -> Tensor:
    """Run the decoder stack on an input embedding sequence ``[L, d]``."""
    cfg = gen.config
    base = gen.base
    length = x.shape[0]
    if length > cfg.max_seq_len:
        raise GeneratorError(f"sequence of {length} positions exceeds max_seq_len {cfg.max_seq_len}")
    pos = Tensor(base["pos_emb"].data[:length])
    x = gc.add(x, pos)
    scale = cfg.lora_scale / cfg.lora_rank
    for b in range(cfg.n_layers):
        p = f"blocks.{b}."
        h = gc.layernorm(x, base[p + "ln1_g"], base[p + "ln1_b"])
        q = _linear(h, base[p + "wq"])
        k = _linear(h, base[p + "wk"])
        v = _linear(h, base[p + "wv"])
        if use_lora:
            q = gc.add(q, gc.scale(_linear(_linear(h, gen.lora[p + "q_A"]), gen.lora[p + "q_B"]), scale))
            v = gc.add(v, gc.scale(_linear(_linear(h, gen.lora[p + "v_A"]), gen.lora[p + "v_B"]), scale))
        att = gc.attention(q, k, v, n_heads=cfg.n_heads, causal=True)
        x = gc.add(x, _linear(att, base[p + "wo"]))
        h = gc.layernorm(x, base[p + "ln2_g"], base[p + "ln2_b"])
        h = gc.relu(_linear(h, base[p + "w1"], base[p + "b1"]))
        x = gc.add(x, _linear(h, base[p + "w2"], base[p + "b2"]))
    return gc.layernorm(x, base["lnf_g"], base["lnf_b"])


def embed_sequence(gen: GeneratorState, instruction: str, context: Tensor | None = None) -> tuple[Tensor, SequenceLayout]:
    ids = tokenize(instruction, gen.config.max_seq_len)
    parts = [gc.embedding_lookup(gen.base["tok_emb"], ids)]
    n_ctx = 0
    if context is not None:
        parts.append(context)
        n_ctx = context.shape[0]
    parts.append(gen.P)
    layout = sequence_layout(len(ids), n_ctx, gen.d1)
    if layout.length > gen.config.max_seq_len:
        raise GeneratorError(
            f"sequence overflow: {len(ids)} instruction + {n_ctx} context + {gen.d1} special "
            f"> max_seq_len {gen.config.max_seq_len}"
        )
    return gc.concat(parts, axis=0), layout


def generate(gen: GeneratorState, instruction: str, context: Tensor | None = None,
             arch: ArchSpec | None = None) -> FlatParams:
    """Generated weights ``w_g`` for ``gen.arch`` (differentiable w.r.t. the trainable triple)."""
    arch = arch or gen.arch
    if arch.arch_id != gen.arch.arch_id or gen.d1 * gen.config.d_model < arch.num_params:
        raise ArchError(f"generator head is sized for {gen.arch.name}, not {arch.name}")
    seq, layout = embed_sequence(gen, instruction, context)
    hidden = decode(gen, seq)
    h_g = gc.slice_view(hidden, slice(layout.special.start, layout.special.stop))
    th = gen.theta
    chunks = _linear(gc.relu(_linear(h_g, th["head_w1"], th["head_b1"])), th["head_w2"], th["head_b2"])
    flat = gc.reshape(chunks, (gen.d1 * gen.config.d_model,))
    values = gc.slice_view(flat, slice(0, arch.num_params))
    return FlatParams(values, arch.layout, arch.arch_id)


def sgd_step(gen: GeneratorState, grads, lr: float) -> None:
    for t in gen.trainable().values():
        g = grads[t]
        t.data -= t.data.dtype.type(lr) * g


# NGGS checkpoint ---------------------------------------------------------------

NGGS_MAGIC = b"NGGSv001"


def _segments(gen: GeneratorState):
    yield "P", gen.P
    for k, v in gen.lora.items():
        yield "lora." + k, v
    for k, v in gen.theta.items():
        yield "theta." + k, v
    for k, v in gen.base.items():
        yield "base." + k, v


def save_generator(path, gen: GeneratorState, extra: dict | None = None) -> None:
    names = [(name, list(t.shape)) for name, t in _segments(gen)]
    header = {
        "config": asdict(gen.config),
        "arch": gen.arch.to_dict(),
        "d1": gen.d1,
        "segments": names,
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(NGGS_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in _segments(gen):
            data = np.ascontiguousarray(t.data, dtype="<f4")
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


def read_generator_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != NGGS_MAGIC:
            raise GeneratorError(f"{path}: not a generator checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return json.loads(fh.read(n).decode("utf-8"))


def load_generator(path) -> GeneratorState:
    raw = Path(path).read_bytes()
    if raw[:8] != NGGS_MAGIC:
        raise GeneratorError(f"{path}: bad magic {raw[:8]!r}")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    gen = GeneratorState(GeneratorConfig(**header["config"]), ArchSpec.from_dict(header["arch"]), _empty=True)
    if gen.d1 != header["d1"]:
        raise GeneratorError(f"{path}: d1 {header['d1']} inconsistent with arch")
    pos = 16 + n
    for name, shape in header["segments"]:
        (count,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        if count != math.prod(shape):
            raise GeneratorError(f"{path}: segment {name} holds {count} values, shape {shape}")
        data = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).astype(np.float32).reshape(shape)
        pos += 4 * count
        if name == "P":
            gen.P = Tensor(data, requires_grad=True)
        elif name.startswith("lora."):
            gen.lora[name[5:]] = Tensor(data, requires_grad=True)
        elif name.startswith("theta."):
            gen.theta[name[6:]] = Tensor(data, requires_grad=True)
        elif name.startswith("base."):
            gen.base[name[5:]] = _frozen(data)
        else:
            raise GeneratorError(f"{path}: unknown segment {name}")
    if pos != len(raw):
        raise GeneratorError(f"{path}: {len(raw) - pos} trailing bytes")
    return gen
