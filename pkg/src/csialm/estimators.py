"""scikit-learn style wrappers around the predictors.

``X`` is a complex uplink history, ``[n, M, F, T]`` (or ``[n, F, T]`` for a
single antenna pair); ``y`` is the complex downlink target ``[n, M, F]`` (or
``[n, F]``). ``score`` returns the negative NMSE so that larger is better.
"""
from __future__ import annotations

import dataclasses

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import training as tr
from .backbone import BackboneConfig, CorpusConfig, StudentConfig, StudentModel, surrogate_pretrain
from .channel_sim import SampleSet
from .distill import RelationConfig
from .errors import DimensionError
from .pipeline import AlignConfig, CSIALM


def check_history(X, name: str = "X") -> np.ndarray:
    """Validate a complex history; returns a complex64 array [n, M, F, T]."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise DimensionError(f"{name} must be [n, M, F, T] or [n, F, T], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X.astype(np.complex64, copy=False)


def check_target(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[:, None]
    if y.shape != X.shape[:3]:
        raise DimensionError(f"y shape {y.shape} does not match X {X.shape} (expected {X.shape[:3]})")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains non-finite values")
    return y.astype(np.complex64, copy=False)


def _samples(X, y=None) -> SampleSet:
    X = check_history(X)
    y = check_target(y, X) if y is not None else np.zeros(X.shape[:3], np.complex64)
    return SampleSet(X, y, np.zeros(len(X)))


def _holdout(samples: SampleSet, fraction: float, seed: int) -> tuple[SampleSet, SampleSet]:
    n = len(samples)
    n_val = int(round(fraction * n))
    if n_val == 0 or n_val >= n:
        return samples, samples
    order = np.random.default_rng([seed, 3]).permutation(n)
    return samples.subset(np.sort(order[n_val:])), samples.subset(np.sort(order[:n_val]))


class _NeuralRegressor(RegressorMixin, BaseEstimator):
    def _fit_data(self, X, y, X_val, y_val):
        train = _samples(X, y)
        if X_val is not None:
            return train, _samples(X_val, y_val)
        return _holdout(train, self.validation_fraction, self.seed)

    def _train_config(self) -> tr.TrainConfig:
        return tr.TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, seed=self.seed,
                              patience=self.patience)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        samples = _samples(X)
        if samples.history.shape[2] != self.n_subcarriers_:
            raise DimensionError(f"fitted on F={self.n_subcarriers_}, got F={samples.history.shape[2]}")
        pred = tr.predict_samples(self.model_, samples)
        return pred[:, 0] if np.asarray(X).ndim == 3 else pred

    def score(self, X, y, sample_weight=None) -> float:
        y = check_target(y, check_history(X))
        return -tr.nmse(self.predict(X).reshape(y.shape), y)


class CSIALMRegressor(_NeuralRegressor):
    """Aligned teacher predictor; ``use_alignment=False`` gives the plain transformer baseline."""

    def __init__(self, layers=6, hidden=128, heads=8, vocab=512, max_positions=64, lora_rank=4, lora_alpha=8.0,
                 frozen_base=True, pretrained=True, pretrain_steps=500, corpus=None, patch_size=4, cssa_dim=8, dict_size=32,
                 anchors=16, prompts=4, use_cssa=True, use_cross_modal=True, use_prompts=True, use_alignment=True,
                 lambda1=0.1, epochs=100, batch_size=64, lr=1e-4, patience=10, validation_fraction=0.1, seed=0):
        self.layers = layers
        self.hidden = hidden
        self.heads = heads
        self.vocab = vocab
        self.max_positions = max_positions
        self.lora_rank = lora_rank
        self.lora_alpha = lora_alpha
        self.frozen_base = frozen_base
        self.pretrained = pretrained
        self.pretrain_steps = pretrain_steps
        self.corpus = corpus
        self.patch_size = patch_size
        self.cssa_dim = cssa_dim
        self.dict_size = dict_size
        self.anchors = anchors
        self.prompts = prompts
        self.use_cssa = use_cssa
        self.use_cross_modal = use_cross_modal
        self.use_prompts = use_prompts
        self.use_alignment = use_alignment
        self.lambda1 = lambda1
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(layers=self.layers, hidden=self.hidden, heads=self.heads, vocab=self.vocab,
                              max_positions=self.max_positions, lora_rank=self.lora_rank,
                              lora_alpha=self.lora_alpha, frozen_base=self.frozen_base)

    def align_config(self) -> AlignConfig:
        return AlignConfig(patch_size=self.patch_size, cssa_dim=self.cssa_dim, dict_size=self.dict_size,
                           anchors=self.anchors, prompts=self.prompts, use_cssa=self.use_cssa,
                           use_cross_modal=self.use_cross_modal, use_prompts=self.use_prompts,
                           use_alignment=self.use_alignment)

    def corpus_config(self) -> CorpusConfig:
        if self.corpus is None or isinstance(self.corpus, CorpusConfig):
            return self.corpus or CorpusConfig()
        return CorpusConfig(**self.corpus)

    def build(self, n_subcarriers: int, pretrained_weights: dict | None = None) -> CSIALM:
        return CSIALM(n_subcarriers, self.backbone_config(), self.align_config(), pretrained_weights, self.seed)

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._fit_data(X, y, X_val, y_val)
        self.n_subcarriers_ = train.history.shape[2]
        weights = None
        if self.pretrained:
            self.pretrain_ = pretrain_backbone(self.backbone_config(), self.pretrain_steps, self.seed,
                                               self.corpus_config())
            weights = self.pretrain_.weights
        self.model_ = self.build(self.n_subcarriers_, weights)
        _, self.run_ = tr.train_teacher(train, val, self.model_, self._train_config(),
                                        tr.TeacherLossConfig(self.lambda1))
        return self


class CSIALMLightRegressor(_NeuralRegressor):
    """Small student; distilled from ``teacher`` (a fitted CSIALMRegressor or CSIALM) when given."""

    def __init__(self, teacher=None, layers=3, hidden=128, heads=8, prompt_len=4, max_positions=64, lambda2=1.0,
                 relation_heads=8, alpha=((1, 0, 0), (0, 1, 0), (0, 0, 1)), epochs=100, batch_size=64, lr=1e-4,
                 patience=10, validation_fraction=0.1, seed=0):
        self.teacher = teacher
        self.layers = layers
        self.hidden = hidden
        self.heads = heads
        self.prompt_len = prompt_len
        self.max_positions = max_positions
        self.lambda2 = lambda2
        self.relation_heads = relation_heads
        self.alpha = alpha
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def student_config(self) -> StudentConfig:
        return StudentConfig(layers=self.layers, hidden=self.hidden, heads=self.heads, prompt_len=self.prompt_len,
                             max_positions=self.max_positions)

    def fit(self, X, y, X_val=None, y_val=None):
        train, val = self._fit_data(X, y, X_val, y_val)
        self.n_subcarriers_ = train.history.shape[2]
        teacher = self.teacher
        if isinstance(teacher, CSIALMRegressor):
            check_is_fitted(teacher, "model_")
            teacher = teacher.model_
        self.model_ = StudentModel(self.n_subcarriers_, self.student_config(), seed=self.seed)
        loss_cfg = tr.StudentLossConfig(self.lambda2, RelationConfig(self.relation_heads, tuple(map(tuple, self.alpha))))
        _, self.run_ = tr.train_student(train, val, teacher, self.model_, self._train_config(), loss_cfg)
        return self


class PersistenceRegressor(RegressorMixin, BaseEstimator):
    """Predicts the next downlink CSI as the most recent uplink CSI."""

    def fit(self, X, y=None):
        self.n_subcarriers_ = check_history(X).shape[2]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "n_subcarriers_")
        out = check_history(X)[..., -1]
        return out[:, 0] if np.asarray(X).ndim == 3 else out

    def score(self, X, y, sample_weight=None) -> float:
        y = check_target(y, check_history(X))
        return -tr.nmse(self.predict(X).reshape(y.shape), y)


def pretrain_backbone(cfg: BackboneConfig, steps: int, seed: int = 0, corpus: CorpusConfig | None = None):
    return surrogate_pretrain(dataclasses.replace(cfg, lora=False), corpus, steps=steps, seed=seed)
