"""Two-stage training of the generator.

Stage 1 pulls the generated weights toward a corpus of classically trained
checkpoints (mean MSE over the corpus). Stage 2 trains through the target
network itself: the generated weights are plugged into a functional forward
and the cross-entropy on a freshly sampled data subset is minimized with
respect to the generator's trainable triple.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from neurogen import gradcore as gc
from neurogen.archspec import ArchSpec, FlatParams, accuracy, functional_forward
from neurogen.dataio import Dataset, sample_subset
from neurogen.generator import (
    STAGE1_INSTRUCTION,
    GeneratorError,
    GeneratorState,
    encode_context,
    follows_template,
    generate,
    sgd_step,
)
from neurogen.gradcore import GradTape, Tensor, backward
from neurogen.refcorpus import CheckpointCorpus, TrainingDivergedError
from neurogen.rng import stream
from neurogen.schedule import lr_at

__all__ = [
    "LossCurve", "SoftClipConfig", "StageConfig", "UnboundedLogitError", "adapt_architecture",
    "final_weights", "lr_at", "soft_clip", "stage1_train", "stage2_train",
]


class UnboundedLogitError(TrainingDivergedError):
    """Stage 2 without alignment or clipping produced non-finite loss."""


@dataclass
class StageConfig:
    epochs: int
    lr: float = 1e-3
    halve_every: int = 10
    m: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.lr <= 0 or self.m < 1 or self.halve_every < 1:
            raise ValueError(f"invalid stage config {self}")


def stage1_defaults(**kw) -> StageConfig:
    return StageConfig(**{"epochs": 30, **kw})


def stage2_defaults(**kw) -> StageConfig:
    return StageConfig(**{"epochs": 20, **kw})


@dataclass
class SoftClipConfig:
    enabled: bool = False
    alpha: float = 1.0

    def __post_init__(self):
        if self.enabled and not self.alpha > 0:
            raise ValueError("alpha must be positive when soft clipping is enabled")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    test_acc: float
    lr: float


@dataclass
class LossCurve:
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, epoch, loss, test_acc, lr) -> None:
        self.records.append(EpochRecord(int(epoch), float(loss), float(test_acc), float(lr)))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]

    @property
    def accuracies(self) -> list[float]:
        return [r.test_acc for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "test_acc", "lr"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), "" if math.isnan(r.test_acc) else repr(r.test_acc), repr(r.lr)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def read_csv(cls, path) -> "LossCurve":
        curve = cls()
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                acc = float(row["test_acc"]) if row["test_acc"] else float("nan")
                curve.append(int(row["epoch"]), float(row["loss"]), acc, float(row["lr"]))
        return curve

    def epochs_to_reach(self, threshold: float) -> int | None:
        """First epoch (1-based count) whose loss is at or below ``threshold``."""
        for r in self.records:
            if r.loss <= threshold:
                return r.epoch + 1
        return None


def soft_clip(w: FlatParams, alpha: float) -> FlatParams:
    """Elementwise ``alpha * tanh(w / alpha)``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    values = gc.scale(gc.tanh(gc.scale(w.values, 1.0 / alpha)), alpha)
    return FlatParams(values, w.layout, w.arch_id)


def _check_finite(loss: Tensor, where: str, epoch: int, unbounded: bool) -> float:
    value = float(loss.data)
    if math.isfinite(value):
        return value
    if unbounded:
        raise UnboundedLogitError(
            f"{where}: non-finite loss at epoch {epoch}; without stage-1 alignment or soft clipping "
            "the generated weights are unbounded and the target logits blow up", epoch)
    raise TrainingDivergedError(f"{where}: non-finite loss at epoch {epoch}", epoch)


def stage1_loss(gen: GeneratorState, targets: list[Tensor]) -> tuple[Tensor, FlatParams]:
    w_g = generate(gen, STAGE1_INSTRUCTION)
    total = None
    for w_i in targets:
        term = gc.mse(w_g.values, w_i)
        total = term if total is None else gc.add(total, term)
    return gc.scale(total, 1.0 / len(targets)), w_g


def stage1_train(gen: GeneratorState, corpus: CheckpointCorpus, config: StageConfig,
                 eval_data: Dataset | None = None, frozen_tables=None) -> tuple[GeneratorState, LossCurve]:
    """One alignment step per epoch against the whole corpus; ``gen`` is updated in place.

    The recorded loss of an epoch is the value before that epoch's update.
    """
    if corpus.arch_id != gen.arch.arch_id:
        raise GeneratorError(f"corpus arch {corpus.arch.name} does not match generator target {gen.arch.name}")
    dtype = gen.P.data.dtype
    targets = [Tensor(flat.values.data.astype(dtype)) for flat, _ in corpus.entries]
    trainables = list(gen.trainable().values())
    curve = LossCurve()
    for epoch in range(config.epochs):
        lr = lr_at(config.lr, epoch, config.halve_every)
        with GradTape() as tape:
            loss, w_g = stage1_loss(gen, targets)
        value = _check_finite(loss, "stage 1", epoch, unbounded=False)
        acc = float("nan")
        if eval_data is not None:
            acc = accuracy(gen.arch, FlatParams(Tensor(w_g.values.data), w_g.layout, w_g.arch_id),
                           eval_data.test.x, eval_data.test.y, frozen_tables)
        grads = backward(loss, tape, wrt=trainables)
        sgd_step(gen, grads, lr)
        curve.append(epoch, value, acc, lr)
    return gen, curve


def eval_context(dataset: Dataset, m: int, seed: int) -> np.ndarray:
    """Fixed context batch used to generate the weights that get evaluated."""
    x, _ = sample_subset(dataset.train, min(m, len(dataset.train)), stream(seed, "stage2-eval"))
    return x


def final_weights(gen: GeneratorState, instruction: str, context_x: np.ndarray,
                  softclip: SoftClipConfig | None = None) -> FlatParams:
    """Generate weights without recording a tape (detached result)."""
    w = generate(gen, instruction, encode_context(gen, context_x))
    if softclip is not None and softclip.enabled:
        w = soft_clip(w, softclip.alpha)
    return FlatParams(Tensor(w.values.data.copy()), w.layout, w.arch_id)


def stage2_train(gen: GeneratorState, dataset: Dataset, instruction: str, config: StageConfig,
                 softclip: SoftClipConfig | None = None, stage1_done: bool = True,
                 frozen_tables=None, arch: ArchSpec | None = None) -> tuple[GeneratorState, LossCurve]:
    """Context-conditioned task-loss tuning; ``gen`` is updated in place.

    Each step resamples ``m`` training pairs, encodes their inputs as
    context, generates weights and takes one SGD step on the mean
    cross-entropy of the generated network over those pairs.
    """
    softclip = softclip or SoftClipConfig()
    arch = arch or gen.arch
    if arch.arch_id != gen.arch.arch_id:
        raise GeneratorError(f"generator targets {gen.arch.name}, not {arch.name}")
    if not follows_template(instruction):
        raise GeneratorError(f"instruction does not follow the stage-2 template: {instruction!r}")
    train = dataset.train
    if config.m > len(train):
        raise ValueError(f"subset size m={config.m} exceeds the {len(train)} training samples")
    if dataset.input_shape != arch.input_shape or dataset.num_classes != arch.num_classes:
        raise GeneratorError(f"dataset {dataset.id} does not fit arch {arch.name}")

    unbounded = not stage1_done and not softclip.enabled
    rng = stream(config.seed, "stage2")
    ctx_eval = eval_context(dataset, config.m, config.seed)
    steps = math.ceil(len(train) / config.m)
    trainables = list(gen.trainable().values())
    curve = LossCurve()
    for epoch in range(config.epochs):
        lr = lr_at(config.lr, epoch, config.halve_every)
        total = 0.0
        for _ in range(steps):
            xs, ys = sample_subset(train, config.m, rng)
            with GradTape() as tape:
                w = generate(gen, instruction, encode_context(gen, xs))
                if softclip.enabled:
                    w = soft_clip(w, softclip.alpha)
                loss = gc.cross_entropy(functional_forward(arch, w, xs, frozen_tables), ys)
            total += _check_finite(loss, "stage 2", epoch, unbounded)
            grads = backward(loss, tape, wrt=trainables)
            sgd_step(gen, grads, lr)
        w_eval = final_weights(gen, instruction, ctx_eval, softclip)
        acc = accuracy(arch, w_eval, dataset.test.x, dataset.test.y, frozen_tables) if w_eval.finite else 0.0
        curve.append(epoch, total / steps, acc, lr)
    return gen, curve


def adapt_architecture(gen: GeneratorState, arch_small: ArchSpec, dataset: Dataset, instruction: str,
                       config: StageConfig, frozen_tables=None,
                       seed: int = 0, head_init: str = "uniform") -> tuple[GeneratorState, LossCurve]:
    """Retarget a trained generator to ``arch_small`` and run stage 2 only."""
    if arch_small.arch_id == gen.arch.arch_id:
        raise GeneratorError("adaptation needs a different target architecture")
    small = gen.retarget(arch_small, seed=seed, head_init=head_init)
    return stage2_train(small, dataset, instruction, config, stage1_done=True, frozen_tables=frozen_tables)
