"""Losses and the teacher / student training loops."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .channel_sim import SampleSet
from .distill import RelationConfig, kd_loss
from .errors import ContractError, NumericError, ParameterError
from .numerics import AdamState, Tensor
from .preprocess import complex_vector, real_vector, to_real

DB_FLOOR = -100.0


def nmse(pred, true):
    """Mean over samples (axis 0) of ||true - pred||^2 / ||true||^2.

    Differentiable when ``pred`` is a Tensor; complex arrays are accepted on the
    numpy path.
    """
    true_data = true.data if isinstance(true, Tensor) else np.asarray(true)
    if true_data.ndim == 0:
        true_data = true_data.reshape(1)
    axes = tuple(range(1, true_data.ndim))
    energy = (np.abs(true_data) ** 2).sum(axis=axes) if axes else np.abs(true_data) ** 2
    if np.any(energy == 0):
        raise ContractError("nmse is undefined for a zero-norm target sample")
    if isinstance(pred, Tensor):
        diff = pred - Tensor._wrap(true_data.astype(pred.dtype))
        err = (diff * diff).sum(axis=axes) if axes else diff * diff
        return (err * Tensor._wrap((1.0 / energy).astype(pred.dtype))).mean()
    return float(np.mean(per_sample_nmse(np.asarray(pred).reshape(true_data.shape), true_data)))


def per_sample_nmse(pred: np.ndarray, true: np.ndarray) -> np.ndarray:
    """Per-sample error ratios, accumulated in double precision."""
    pred = np.asarray(pred).astype(np.result_type(pred, np.float64))
    true = np.asarray(true).astype(np.result_type(true, np.float64))
    if true.ndim == 0:
        pred, true = pred.reshape(1), true.reshape(1)
    axes = tuple(range(1, true.ndim))
    energy = (np.abs(true) ** 2).sum(axis=axes) if axes else np.abs(true) ** 2
    if np.any(energy == 0):
        raise ContractError("nmse is undefined for a zero-norm target sample")
    err = np.abs(true - pred) ** 2
    return (err.sum(axis=axes) if axes else err) / energy


def to_db(x, floor: float | None = None):
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(np.asarray(x, dtype=float))
    if floor is not None:
        out = np.maximum(out, floor)
    return float(out) if np.ndim(out) == 0 else out


def alignment_loss(y_text, prompts) -> Tensor:
    """Mean cosine similarity between the time-pooled sequence [..., T, D] and each prompt [..., K, D]."""
    prompts = nx.as_tensor(prompts)
    if prompts.shape[-2] < 1:
        raise ContractError("alignment_loss needs at least one prompt")
    pooled = nx.as_tensor(y_text).mean(axis=-2)
    sims = nx.cosine_similarity(pooled.reshape(*pooled.shape[:-1], 1, pooled.shape[-1]), prompts)
    return sims.mean()


@dataclass(frozen=True)
class TeacherLossConfig:
    lambda1: float = 0.1

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ParameterError(f"lambda1 must be >= 0, got {self.lambda1}")


@dataclass(frozen=True)
class StudentLossConfig:
    lambda2: float = 1.0
    relation: RelationConfig = field(default_factory=RelationConfig)

    def __post_init__(self):
        if self.lambda2 < 0:
            raise ParameterError(f"lambda2 must be >= 0, got {self.lambda2}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-4
    seed: int = 0
    patience: int = 10
    max_steps: int | None = None
    eval_batch: int = 1024

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ParameterError(f"invalid training config {self}")
        if self.lr <= 0:
            raise ParameterError(f"learning rate must be positive, got {self.lr}")


LOG_COLUMNS = ("epoch", "split", "nmse_db", "loss_total", "loss_align_or_kd", "wall_ms")


@dataclass
class TrainRun:
    config: TrainConfig
    log: list = field(default_factory=list)
    epochs_run: int = 0
    steps: int = 0
    best_epoch: int = -1
    best_val_nmse: float = float("inf")
    stopped_early: bool = False
    optimizer: AdamState | None = None

    def rows(self, split: str | None = None) -> list[dict]:
        return [r for r in self.log if split is None or r["split"] == split]


def sequences(samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Flatten antenna pairs: history [n, M, F, T] -> X [n*M, 2F, T], target -> Y [n*M, 2F]."""
    h, t = samples.history, samples.target
    n, m = h.shape[:2]
    x = to_real(h).reshape(n * m, 2 * h.shape[2], h.shape[3])
    y = real_vector(t).reshape(n * m, 2 * t.shape[2])
    return np.ascontiguousarray(x, dtype=np.float32), np.ascontiguousarray(y, dtype=np.float32)


def _output(out):
    pred, extra = out
    traces = extra.traces if hasattr(extra, "traces") else extra
    return pred, extra, traces


def predict_sequences(model, x: np.ndarray, batch: int = 1024) -> np.ndarray:
    was_training = model.training
    model.eval()
    outs = []
    with nx.no_grad():
        for i in range(0, len(x), batch):
            pred, _, _ = _output(model(nx.as_tensor(x[i:i + batch].astype(nx.get_default_dtype()))))
            outs.append(pred.data)
    model.train(was_training)
    return np.concatenate(outs, axis=0) if outs else np.zeros((0,))


def predict_samples(model, samples: SampleSet, batch: int = 1024) -> np.ndarray:
    """Complex downlink predictions [n, M, F]."""
    x, _ = sequences(samples)
    n, m, f = samples.target.shape
    return complex_vector(predict_sequences(model, x, batch)).reshape(n, m, f)


def evaluate(model, samples: SampleSet, batch: int = 1024) -> float:
    return nmse(predict_samples(model, samples, batch), samples.target)


def few_shot_subset(samples: SampleSet, fraction: float, seed: int = 0) -> SampleSet:
    """Exactly round(fraction * n) samples, allocated across velocity strata by largest remainder."""
    if not 0 < fraction <= 1:
        raise ParameterError(f"few-shot fraction must be in (0, 1], got {fraction}")
    n = len(samples)
    total = int(round(fraction * n))
    levels, inverse = np.unique(samples.velocity_kmh, return_inverse=True)
    counts = np.bincount(inverse, minlength=len(levels))
    quota = counts * total / n
    take = np.floor(quota).astype(int)
    remainder = quota - take
    for i in np.argsort(-remainder, kind="stable")[: total - take.sum()]:
        take[i] += 1
    rng = np.random.default_rng([seed, 7])
    chosen = []
    for level, k in enumerate(take):
        members = np.flatnonzero(inverse == level)
        chosen.append(np.sort(rng.choice(members, size=k, replace=False)))
    return samples.subset(np.sort(np.concatenate(chosen)))


def fit_loop(model, step_loss, train: SampleSet, val: SampleSet, cfg: TrainConfig,
             run: TrainRun | None = None) -> TrainRun:
    x, y = sequences(train)
    if len(x) == 0:
        raise ContractError("training set is empty")
    run = run or TrainRun(cfg)
    params = model.trainable_parameters()
    opt = nx.Adam(params, lr=cfg.lr)
    if run.optimizer is not None:
        opt.state = run.optimizer
    run.optimizer = opt.state
    best_state = model.state_dict() if run.best_epoch >= 0 else None
    stale = 0
    rng = np.random.default_rng([cfg.seed, 99])
    for _ in range(run.epochs_run):  # keep the shuffle stream aligned on resume
        rng.permutation(len(x))
    dtype = nx.get_default_dtype()
    for epoch in range(run.epochs_run, cfg.epochs):
        start = time.perf_counter()
        model.train()
        order = rng.permutation(len(x))
        sums = np.zeros(3)
        seen = 0
        for lo in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and run.steps >= cfg.max_steps:
                break
            idx = order[lo:lo + cfg.batch_size]
            opt.zero_grad()
            total, fit_term, aux = step_loss(nx.as_tensor(x[idx].astype(dtype)), y[idx])
            value = float(total.data)
            if not np.isfinite(value):
                raise NumericError(f"loss diverged ({value}) at epoch {epoch}, step {run.steps}")
            total.backward()
            opt.step()
            run.steps += 1
            sums += len(idx) * np.array([float(fit_term.data), value, float(aux)])
            seen += len(idx)
        if seen == 0:
            break
        sums /= seen
        train_ms = (time.perf_counter() - start) * 1e3
        run.log.append(dict(epoch=epoch, split="train", nmse_db=to_db(sums[0], DB_FLOOR),
                            loss_total=sums[1], loss_align_or_kd=sums[2], wall_ms=train_ms))
        start = time.perf_counter()
        val_nmse = evaluate(model, val, cfg.eval_batch) if len(val) else sums[0]
        run.log.append(dict(epoch=epoch, split="val", nmse_db=to_db(val_nmse, DB_FLOOR),
                            loss_total=val_nmse, loss_align_or_kd=0.0,
                            wall_ms=(time.perf_counter() - start) * 1e3))
        run.epochs_run = epoch + 1
        if val_nmse < run.best_val_nmse:
            run.best_val_nmse, run.best_epoch = val_nmse, epoch
            best_state = model.state_dict()
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                run.stopped_early = True
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.zero_grad()
    model.eval()
    return run


def train_teacher(train: SampleSet, val: SampleSet, model, cfg: TrainConfig | None = None,
                  loss_cfg: TeacherLossConfig | None = None, run: TrainRun | None = None):
    """Minimize NMSE - lambda1 * alignment over the model's trainable parameters."""
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or TeacherLossConfig()

    def step_loss(xb, yb):
        pred, info = model(xb)
        fit = nmse(pred, yb)
        if info.prompts is None:
            return fit, fit, 0.0
        align = alignment_loss(info.y_text, info.prompts)
        return fit - align * loss_cfg.lambda1, fit, float(align.data)

    return model, fit_loop(model, step_loss, train, val, cfg, run)


def train_student(train: SampleSet, val: SampleSet, teacher, student, cfg: TrainConfig | None = None,
                  loss_cfg: StudentLossConfig | None = None, run: TrainRun | None = None):
    """Minimize NMSE + lambda2 * relation KD against a frozen teacher (``teacher=None``: plain NMSE)."""
    cfg = cfg or TrainConfig()
    loss_cfg = loss_cfg or StudentLossConfig()
    if teacher is not None:
        teacher.eval()

    def step_loss(xb, yb):
        pred, _, traces = _output(student(xb, trace=teacher is not None))
        fit = nmse(pred, yb)
        if teacher is None:
            return fit, fit, 0.0
        with nx.no_grad():
            _, _, t_traces = _output(teacher(xb, trace=True))
        rel = loss_cfg.relation
        if rel.window is None:
            rel = RelationConfig(rel.heads, rel.alpha, xb.shape[-1])
        kd = kd_loss(t_traces[-1], traces[-1], rel)
        return fit + kd * loss_cfg.lambda2, fit, float(kd.data)

    return student, fit_loop(student, step_loss, train, val, cfg, run)
