"""Classically trained reference networks and the checkpoint corpus.

Reference training uses a stateful torch module whose parameters map
one-to-one onto the flat layout of an :class:`ArchSpec`. Besides producing
the corpus, the module is the independent oracle that
:func:`neurogen.archspec.functional_forward` is checked against.
"""

from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from neurogen.archspec import PAD_ID, ArchError, ArchSpec, FlatParams
from neurogen.dataio import Dataset
from neurogen.gradcore import Tensor
from neurogen.schedule import lr_at, max_workers


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, epoch: int | None = None, seed: int | None = None):
        super().__init__(message)
        self.epoch = epoch
        self.seed = seed


@dataclass
class RefTrainConfig:
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    halve_every: int = 10

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError(f"invalid reference training config {self}")


@dataclass
class CheckpointMeta:
    seed: int
    epochs: int
    final_train_loss: float
    test_accuracy: float
    dataset_id: str

    def __post_init__(self):
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError("test_accuracy must lie in [0, 1]")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


class ReferenceNet(nn.Module):
    """Stateful twin of an ArchSpec; ``params`` follows the flat layout order."""

    def __init__(self, arch: ArchSpec, frozen_tables=None, seed: int = 0):
        super().__init__()
        self.arch = arch
        gen = torch.Generator().manual_seed(seed)
        params = []
        for seg in arch.layout:
            layer = arch.layers[seg.layer]
            if layer.kind == "rnn_vanilla":
                bound = 1.0 / math.sqrt(layer.hidden)
            elif layer.kind == "embedding_ref":
                bound = 1.0 / math.sqrt(layer.dim)
            else:
                w_seg = next(s for s in arch.layout if s.layer == seg.layer and s.role == "weight")
                bound = 1.0 / math.sqrt(math.prod(w_seg.shape[1:]))
            t = (torch.rand(seg.shape, generator=gen, dtype=torch.float32) * 2 - 1) * bound
            params.append(nn.Parameter(t))
        self.params = nn.ParameterList(params)
        self._index = {(s.layer, s.role): i for i, s in enumerate(arch.layout)}
        self.tables = {}
        for i, layer in enumerate(arch.layers):
            if layer.kind == "embedding_ref" and layer.frozen:
                table = frozen_tables if not isinstance(frozen_tables, dict) else frozen_tables[i]
                if table is None:
                    raise ArchError(f"layer {i} needs a frozen embedding table")
                data = table.data if isinstance(table, Tensor) else np.asarray(table)
                buf = torch.from_numpy(np.array(data, dtype=np.float32))
                self.register_buffer(f"table{i}", buf)
                self.tables[i] = f"table{i}"

    def _p(self, layer, role):
        return self.params[self._index[(layer, role)]]

    def forward(self, x):
        arch = self.arch
        ids = x if arch.modality == "text" else None
        mask = None if ids is None else ids != PAD_ID
        for i, layer in enumerate(arch.layers):
            kind = layer.kind
            if kind == "conv2d":
                x = F.conv2d(x, self._p(i, "weight"), self._p(i, "bias"),
                             stride=layer.stride, padding=layer.padding)
            elif kind == "relu":
                x = F.relu(x)
            elif kind == "maxpool2d":
                x = F.max_pool2d(x, layer.k)
            elif kind == "global_avg_pool":
                x = x.mean(dim=(2, 3))
            elif kind == "flatten":
                x = x.reshape(x.shape[0], -1)
            elif kind == "linear":
                x = F.linear(x, self._p(i, "weight"), self._p(i, "bias"))
            elif kind == "embedding_ref":
                table = getattr(self, self.tables[i]) if layer.frozen else self._p(i, "weight")
                x = F.embedding(ids, table)
            elif kind == "mean_pool_tokens":
                m = mask.unsqueeze(-1).to(x.dtype)
                x = (x * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
            elif kind == "rnn_vanilla":
                w_in, w_rec, b = self._p(i, "weight"), self._p(i, "recurrent"), self._p(i, "bias")
                h = x.new_zeros(x.shape[0], layer.hidden)
                states = []
                for t in range(x.shape[1]):
                    h_new = torch.tanh(x[:, t] @ w_in.T + h @ w_rec.T + b)
                    keep = mask[:, t].unsqueeze(-1).to(x.dtype)
                    h = h_new * keep + h * (1 - keep)
                    states.append(h)
                x = torch.stack(states, dim=1)
            elif kind == "take_last_hidden":
                x = x[:, -1]
        return x

    def to_flat(self) -> FlatParams:
        with torch.no_grad():
            values = torch.cat([p.reshape(-1) for p in self.params]).to(torch.float32).numpy().copy()
        return FlatParams(Tensor(values), self.arch.layout, self.arch.arch_id)

    def load_flat(self, flat: FlatParams) -> "ReferenceNet":
        if flat.arch_id != self.arch.arch_id:
            raise ArchError("weights do not belong to this architecture")
        values = torch.from_numpy(np.array(flat.values.data))
        with torch.no_grad():
            for seg, p in zip(self.arch.layout, self.params):
                p.copy_(values[seg.offset:seg.stop].reshape(seg.shape).to(p.dtype))
        return self


def _inputs(x: np.ndarray, arch: ArchSpec, dtype=torch.float32):
    t = torch.from_numpy(np.array(x))
    return t.long() if arch.modality == "text" else t.to(dtype)


def evaluate(net: ReferenceNet, x: np.ndarray, y: np.ndarray, batch_size: int = 512) -> float:
    if len(y) == 0:
        return 0.0
    correct = 0
    with torch.no_grad():
        for s in range(0, len(y), batch_size):
            logits = net(_inputs(x[s:s + batch_size], net.arch))
            correct += int((logits.argmax(dim=1).numpy() == y[s:s + batch_size]).sum())
    return correct / len(y)


def train_reference(arch: ArchSpec, dataset: Dataset, seed: int, config: RefTrainConfig | None = None,
                    frozen_tables=None, curve: list | None = None) -> tuple[FlatParams, CheckpointMeta]:
    """Plain mini-batch SGD with step-halving learning rate; deterministic given ``seed``.

    When ``curve`` is a list, one ``(epoch, loss, test_acc, lr)`` tuple is
    appended per epoch.
    """
    config = config or RefTrainConfig()
    if dataset.input_shape != arch.input_shape or dataset.num_classes != arch.num_classes:
        raise ArchError(f"dataset {dataset.id} {dataset.input_shape}/{dataset.num_classes} "
                        f"does not fit arch {arch.name} {arch.input_shape}/{arch.num_classes}")
    torch.set_num_threads(max_workers())
    net = ReferenceNet(arch, frozen_tables, seed=seed)
    opt = torch.optim.SGD(net.parameters(), lr=config.lr)
    rng = np.random.default_rng([seed, 0x5EED])
    x_train, y_train = dataset.train.x, dataset.train.y
    n = len(y_train)
    epoch_loss = float("nan")
    for epoch in range(config.epochs):
        lr = lr_at(config.lr, epoch, config.halve_every)
        for group in opt.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        total, count = 0.0, 0
        for s in range(0, n, config.batch_size):
            idx = order[s:s + config.batch_size]
            logits = net(_inputs(x_train[idx], arch))
            loss = F.cross_entropy(logits, torch.from_numpy(y_train[idx]))
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch} (seed {seed})", epoch, seed)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        epoch_loss = total / count
        if curve is not None:
            curve.append((epoch, epoch_loss, evaluate(net, dataset.test.x, dataset.test.y), lr))
    acc = evaluate(net, dataset.test.x, dataset.test.y)
    meta = CheckpointMeta(seed, config.epochs, epoch_loss, acc, dataset.id)
    return net.to_flat(), meta


# corpus --------------------------------------------------------------------

@dataclass
class CheckpointCorpus:
    arch: ArchSpec
    entries: list[tuple[FlatParams, CheckpointMeta]] = field(default_factory=list)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a corpus needs at least one entry")
        for flat, _ in self.entries:
            if flat.arch_id != self.arch.arch_id:
                raise ArchError("corpus entries must share the corpus architecture")

    @property
    def arch_id(self) -> str:
        return self.arch.arch_id

    @property
    def N(self) -> int:
        return len(self.entries)

    def matrix(self) -> np.ndarray:
        """Entries stacked as an ``[N, |w|]`` float32 array."""
        return np.stack([flat.values.data for flat, _ in self.entries])


def _train_job(args):
    arch, dataset, seed, config, tables = args
    return train_reference(arch, dataset, seed, config, tables)


def build_corpus(arch: ArchSpec, dataset: Dataset, N: int = 8, base_seed: int = 0,
                 config: RefTrainConfig | None = None, frozen_tables=None,
                 workers: int | None = None) -> CheckpointCorpus:
    """Train ``N`` references with seeds ``base_seed .. base_seed + N - 1``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    seeds = [base_seed + i for i in range(N)]
    workers = min(N, workers or max_workers())
    jobs = [(arch, dataset, s, config, frozen_tables) for s in seeds]
    entries = []
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for seed, result in zip(seeds, pool.map(_train_job, jobs)):
                entries.append(result)
    else:
        for seed, job in zip(seeds, jobs):
            try:
                entries.append(_train_job(job))
            except TrainingDivergedError as exc:
                raise TrainingDivergedError(f"seed {seed}: {exc}", exc.epoch, seed) from exc
    return CheckpointCorpus(arch, entries)


def corpus_stats(corpus: CheckpointCorpus) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate mean and (population) variance over corpus entries."""
    m = corpus.matrix().astype(np.float64)
    return m.mean(axis=0), m.var(axis=0)


NGPC_MAGIC = b"NGPCv001"


def write_corpus(path, corpus: CheckpointCorpus) -> None:
    arch = corpus.arch
    with open(path, "wb") as fh:
        fh.write(NGPC_MAGIC)
        fh.write(arch.arch_hash)
        fh.write(struct.pack("<QQ", corpus.N, arch.num_params))
        for flat, meta in corpus.entries:
            fh.write(np.ascontiguousarray(flat.values.data, dtype="<f4").tobytes())
            blob = json.dumps(asdict(meta), sort_keys=True).encode("utf-8")
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)


def read_corpus(path, arch: ArchSpec) -> CheckpointCorpus:
    raw = Path(path).read_bytes()
    if raw[:8] != NGPC_MAGIC:
        raise ArchError(f"{path}: bad magic {raw[:8]!r}")
    if raw[8:16] != arch.arch_hash:
        raise ArchError(f"{path}: arch hash {raw[8:16].hex()} does not match {arch.arch_id}")
    n, size = struct.unpack("<QQ", raw[16:32])
    if size != arch.num_params:
        raise ArchError(f"{path}: |w| = {size}, arch needs {arch.num_params}")
    pos = 32
    entries = []
    for _ in range(n):
        values = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).astype(np.float32)
        pos += 4 * size
        (blen,) = struct.unpack("<Q", raw[pos:pos + 8])
        pos += 8
        meta = CheckpointMeta(**json.loads(raw[pos:pos + blen].decode("utf-8")))
        pos += blen
        entries.append((FlatParams(Tensor(values), arch.layout, arch.arch_id), meta))
    if pos != len(raw):
        raise ArchError(f"{path}: {len(raw) - pos} trailing bytes")
    return CheckpointCorpus(arch, entries)


def peek_corpus_hash(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(16)
    if head[:8] != NGPC_MAGIC:
        raise ArchError(f"{path}: bad magic {head[:8]!r}")
    return head[8:16]
