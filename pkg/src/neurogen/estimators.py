"""scikit-learn style wrappers.

:class:`ReferenceClassifier` trains a target network classically.
:class:`NeuroGenClassifier` runs the whole generator pipeline inside ``fit``:
reference corpus, parameter alignment, then context-conditioned tuning, and
predicts with the generated weights.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from neurogen import gradcore as gc
from neurogen.archspec import ArchSpec, builtin_arch, embedding_table, functional_forward
from neurogen.dataio import Dataset, DatasetHandle
from neurogen.generator import GeneratorConfig, GeneratorState, stage2_instruction
from neurogen.refcorpus import RefTrainConfig, build_corpus, train_reference
from neurogen.training import StageConfig, eval_context, final_weights, stage1_train, stage2_train


def _modality(kind: str) -> str:
    if kind in ("cnn3", "cnn2", "lenet"):
        return "image"
    return "text" if kind in ("mlp_text", "rnn_text") else "vector"


class _TargetNetMixin:
    """Shared input handling: builds the target arch from ``X``'s trailing shape."""

    def _check_fit_data(self, X, y):
        X = np.asarray(X)
        if _modality(self.arch_kind) != "text":
            X = X.astype(np.float32)
        check_X_y(X.reshape(len(X), -1), y, dtype=None)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        y_idx = np.searchsorted(self.classes_, y)
        self.input_shape_ = tuple(X.shape[1:])
        self.n_features_in_ = int(np.prod(self.input_shape_))
        return X, y_idx

    def _check_predict_data(self, X):
        check_is_fitted(self, "weights_")
        X = np.asarray(X)
        if _modality(self.arch_kind) != "text":
            X = X.astype(np.float32)
        check_array(X.reshape(len(X), -1), dtype=None)
        if tuple(X.shape[1:]) != self.input_shape_:
            raise ValueError(f"X has sample shape {X.shape[1:]}, fitted on {self.input_shape_}")
        return X

    def _build_arch(self) -> ArchSpec:
        kw = {"hidden": self.hidden}
        if self.widths is not None:
            kw["widths"] = self.widths
        return builtin_arch(self.arch_kind, self.input_shape_, len(self.classes_), **kw)

    def _tables(self, arch):
        tables = {i: embedding_table(l.vocab, l.dim, self.random_state)
                  for i, l in enumerate(arch.layers) if l.kind == "embedding_ref"}
        return tables or None

    def _dataset(self, X, y_idx, modality):
        k = len(self.classes_)
        train = DatasetHandle("fit", modality, X, y_idx, k, "train")
        return Dataset(train, DatasetHandle("fit", modality, X, y_idx, k, "test"))

    def decision_function(self, X):
        X = self._check_predict_data(X)
        logits = functional_forward(self.arch_, self.weights_, X, self.tables_)
        return logits.data

    def predict_proba(self, X):
        return gc.softmax(gc.Tensor(self.decision_function(X))).data

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]


class ReferenceClassifier(_TargetNetMixin, ClassifierMixin, BaseEstimator):
    """A builtin target network trained with plain SGD."""

    def __init__(self, arch_kind="mlp", hidden=64, widths=None, epochs=30, lr=0.1, batch_size=64,
                 random_state=0):
        self.arch_kind = arch_kind
        self.hidden = hidden
        self.widths = widths
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._check_fit_data(X, y)
        self.arch_ = self._build_arch()
        self.tables_ = self._tables(self.arch_)
        data = self._dataset(X, y_idx, self.arch_.modality)
        cfg = RefTrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size)
        self.weights_, self.meta_ = train_reference(self.arch_, data, self.random_state, cfg, self.tables_)
        return self


class NeuroGenClassifier(_TargetNetMixin, ClassifierMixin, BaseEstimator):
    """Target network whose weights come from the trained generator.

    ``fit`` builds a corpus of ``corpus_size`` classical checkpoints, aligns
    the generator to it and then tunes it on ``X, y`` with context batches
    of ``m`` samples. ``weights_`` are generated from a fixed context batch.
    """

    def __init__(self, arch_kind="mlp", hidden=64, widths=None, d_model=128, n_layers=4, n_heads=4,
                 corpus_size=8, reference_epochs=30, reference_lr=0.1, stage1_epochs=30, stage1_lr=5.0,
                 stage2_epochs=20, stage2_lr=1e-3, m=32, dataset_name="data", random_state=0):
        self.arch_kind = arch_kind
        self.hidden = hidden
        self.widths = widths
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.corpus_size = corpus_size
        self.reference_epochs = reference_epochs
        self.reference_lr = reference_lr
        self.stage1_epochs = stage1_epochs
        self.stage1_lr = stage1_lr
        self.stage2_epochs = stage2_epochs
        self.stage2_lr = stage2_lr
        self.m = m
        self.dataset_name = dataset_name
        self.random_state = random_state

    def fit(self, X, y):
        X, y_idx = self._check_fit_data(X, y)
        self.arch_ = self._build_arch()
        self.tables_ = self._tables(self.arch_)
        data = self._dataset(X, y_idx, self.arch_.modality)
        ref = RefTrainConfig(epochs=self.reference_epochs, lr=self.reference_lr)
        corpus = build_corpus(self.arch_, data, N=self.corpus_size, base_seed=self.random_state,
                              config=ref, frozen_tables=self.tables_)
        gen = GeneratorState(GeneratorConfig(d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
                                             seed=self.random_state), self.arch_)
        gen, self.stage1_curve_ = stage1_train(gen, corpus, StageConfig(self.stage1_epochs, self.stage1_lr,
                                                                        seed=self.random_state))
        self.instruction_ = stage2_instruction(self.arch_kind.upper(), self.dataset_name)
        s2 = StageConfig(self.stage2_epochs, self.stage2_lr, m=min(self.m, len(X)), seed=self.random_state)
        gen, self.stage2_curve_ = stage2_train(gen, data, self.instruction_, s2, frozen_tables=self.tables_)
        self.generator_ = gen
        self.weights_ = final_weights(gen, self.instruction_, eval_context(data, s2.m, s2.seed))
        return self

    def generate_for(self, X_context):
        """Weights generated from a caller-chosen context batch."""
        check_is_fitted(self, "generator_")
        return final_weights(self.generator_, self.instruction_, np.asarray(X_context))
