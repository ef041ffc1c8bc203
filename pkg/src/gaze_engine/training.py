"""Losses, learning-rate schedule, teacher training, fine-tuning and distillation."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .data import LATTICE, Batch, FrameSample
from .errors import ConfigurationError, ContractError, NonFiniteLossError
from .model import ForwardOutput, StudentConfig, as_batch, forward
from .tensor import ModelParams, Tensor, backward, fully_connected, no_grad, sgd_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 150_000
    batch_size: int = 256
    lr_initial: float = 0.001
    lr_drop_iteration: int = 75_000
    lr_after_drop: float = 0.0001
    momentum: float = 0.9
    weight_decay: float = 0.0005
    augment_train: bool = False
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.trace_every < 1:
            raise ConfigurationError("iterations must be >= 0, batch_size and trace_every >= 1")
        if min(self.lr_initial, self.lr_after_drop) <= 0:
            raise ConfigurationError("learning rates must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigurationError("momentum and weight_decay must be non-negative")
        if self.lr_drop_iteration > self.iterations:
            raise ConfigurationError("lr_drop_iteration must not exceed iterations")

    def lr_at(self, step: int) -> float:
        return self.lr_initial if step < self.lr_drop_iteration else self.lr_after_drop


def desk_train_config(**changes) -> TrainConfig:
    base = dict(
        iterations=2000, batch_size=32, lr_initial=0.003, lr_drop_iteration=1500,
        lr_after_drop=0.0003, momentum=0.9, weight_decay=0.0005,
    )
    base.update(changes)
    return TrainConfig(**base)


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 0.1

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ConfigurationError("distillation weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ConfigurationError("at least one distillation weight must be positive")


@dataclass
class TraceRow:
    step: int
    lr: float
    loss: float


@dataclass
class TrainResult:
    params: ModelParams
    trace: list[TraceRow] = field(default_factory=list)

    def trace_csv(self) -> str:
        return trace_to_csv(self.trace)


def trace_to_csv(trace: Sequence[TraceRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", "loss"])
    for r in trace:
        w.writerow([r.step, repr(r.lr), f"{r.loss:.9g}"])
    return buf.getvalue()


def euclidean_loss(pred: Tensor, target) -> Tensor:
    """(1/2N) * sum_i ||pred_i - target_i||^2."""
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.dims != target.dims:
        raise ContractError(f"prediction dims {pred.dims} != target dims {target.dims}")
    diff = pred - target
    return (diff * diff).sum() * (0.5 / pred.dims[0])


# ---------------------------------------------------------------------------
# minibatch stream
# ---------------------------------------------------------------------------


class _BatchStream:
    """Seeded epoch permutations over frames (or frame x lattice shift pairs)."""

    def __init__(self, n: int, batch_size: int, augment: bool, rng: np.random.Generator):
        self.pool = n * (25 if augment else 1)
        self.augment = augment
        self.batch_size = batch_size
        self.rng = rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        out = []
        need = self.batch_size
        while need:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.pool)
                self._pos = 0
            take = self._order[self._pos : self._pos + need]
            self._pos += len(take)
            need -= len(take)
            out.append(take)
        return np.concatenate(out)


def _select(data: Batch, keys: np.ndarray, augment: bool) -> Batch:
    if not augment:
        return data.take(keys)
    frame, cell = np.divmod(keys, 25)
    sub = data.take(frame)
    lattice = np.asarray(LATTICE)
    return sub.shifted(lattice[cell % 5], lattice[cell // 5])


LossFn = Callable[[ModelParams, Batch], Tensor]


def _run_sgd(params: ModelParams, data: Batch, cfg: TrainConfig, loss_fn: LossFn,
             extra: ModelParams | None = None, lr_override: float | None = None,
             step_offset: int = 0) -> list[TraceRow]:
    if len(data) == 0:
        raise ContractError("training data is empty")
    stream = _BatchStream(len(data), cfg.batch_size, cfg.augment_train, np.random.default_rng(cfg.seed))
    trace: list[TraceRow] = []
    groups = [params] if extra is None else [params, extra]
    for step in range(cfg.iterations):
        lr = lr_override if lr_override is not None else cfg.lr_at(step_offset + step)
        batch = _select(data, stream.next(), cfg.augment_train)
        for g in groups:
            g.zero_grad()
        loss = loss_fn(params, batch)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NonFiniteLossError(step_offset + step, value)
        backward(loss)
        for g in groups:
            sgd_step(g, lr, cfg.momentum, cfg.weight_decay)
        if step % cfg.trace_every == 0 or step == cfg.iterations - 1:
            trace.append(TraceRow(step_offset + step, lr, value))
            log.debug("step %d lr %g loss %.6g", step_offset + step, lr, value)
    for g in groups:
        g.zero_grad()
    return trace


def _supervised(params: ModelParams, batch: Batch) -> Tensor:
    return euclidean_loss(forward(params, batch).pred, batch.target_cm)


def train(params: ModelParams, data, cfg: TrainConfig) -> TrainResult:
    """Minibatch momentum SGD on the Euclidean loss; updates ``params`` in place."""
    data = as_batch(data)
    return TrainResult(params, _run_sgd(params, data, cfg, _supervised))


# ---------------------------------------------------------------------------
# per-device fine-tuning
# ---------------------------------------------------------------------------


def fine_tune(params: ModelParams, data: Sequence[FrameSample], cfg: TrainConfig) -> TrainResult:
    """Continue training a copy of ``params`` on one (device, orientation) at ``lr_after_drop``."""
    if not data:
        raise ContractError("fine-tuning subset is empty")
    keys = {(s.device, s.orientation) for s in data}
    if len(keys) != 1:
        raise ContractError(f"fine-tuning subset mixes {len(keys)} (device, orientation) pairs")
    tuned = params.copy()
    trace = _run_sgd(tuned, as_batch(data), cfg, _supervised, lr_override=cfg.lr_after_drop)
    return TrainResult(tuned, trace)


class FineTuneRegistry:
    """Per-(device, orientation) models with fallback to the generic model."""

    def __init__(self, generic: ModelParams):
        self.generic = generic
        self._models: dict[tuple[str, str], ModelParams] = {}

    @staticmethod
    def _key(device, orientation) -> tuple[str, str]:
        return str(device), getattr(orientation, "value", str(orientation))

    def register(self, device, orientation, params: ModelParams) -> None:
        self._models[self._key(device, orientation)] = params

    def lookup(self, device, orientation) -> ModelParams:
        return self._models.get(self._key(device, orientation), self.generic)

    def __contains__(self, key) -> bool:
        return self._key(*key) in self._models


# ---------------------------------------------------------------------------
# distillation
# ---------------------------------------------------------------------------


def orthogonal(rng: np.random.Generator, rows: int, cols: int) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    return (q if rows >= cols else q.T).astype(np.float32)


@dataclass
class DistillResult(TrainResult):
    projection: ModelParams | None = None


def distill(student: ModelParams, teacher: ModelParams, data, cfg: DistillConfig,
            tcfg: TrainConfig) -> DistillResult:
    """Train ``student`` on ground truth plus the frozen teacher's predictions and fc1 features.

    L = alpha * E(s_pred, y) + beta * E(s_pred, t_pred) + gamma * E(P s_feat, t_fc1)
    where E is :func:`euclidean_loss` and P is a learned linear projection.
    """
    if not isinstance(student.config, StudentConfig):
        raise ContractError("distill expects a student network")
    data = as_batch(data)
    t_dim = teacher.config.feature_width
    s_dim = student.config.feature_width
    proj = ModelParams(
        {"projection": Tensor(orthogonal(np.random.default_rng([tcfg.seed, 0x9A0]), t_dim, s_dim),
                              requires_grad=True)}
    )

    def loss_fn(params: ModelParams, batch: Batch) -> Tensor:
        out = forward(params, batch)
        loss = euclidean_loss(out.pred, batch.target_cm) * cfg.alpha if cfg.alpha else None
        if cfg.beta or cfg.gamma:
            with no_grad():
                t_out = forward(teacher, batch)
            if cfg.beta:
                term = euclidean_loss(out.pred, t_out.pred.data) * cfg.beta
                loss = term if loss is None else loss + term
            if cfg.gamma:
                projected = fully_connected(out.features, proj["projection"])
                term = euclidean_loss(projected, t_out.features.data) * cfg.gamma
                loss = term if loss is None else loss + term
        return loss

    extra = proj if cfg.gamma else None
    trace = _run_sgd(student, data, tcfg, loss_fn, extra=extra)
    return DistillResult(student, trace, proj)


def predict(params: ModelParams, data, batch_size: int = 256) -> ForwardOutput:
    """Graph-free forward over any number of frames, returned as numpy-backed tensors."""
    batch = as_batch(data)
    preds, feats = [], []
    with no_grad():
        for start in range(0, len(batch), batch_size):
            out = forward(params, batch.take(np.arange(start, min(start + batch_size, len(batch)))))
            preds.append(out.pred.data)
            feats.append(out.features.data)
    return ForwardOutput(Tensor(np.concatenate(preds)), Tensor(np.concatenate(feats)))


TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
DISTILL_KEYS = {f.name for f in fields(DistillConfig)}
