"""Cross-entropy objective, Adam, step learning-rate decay, early stopping,
dataset splitting, the batch training loop and ``MMF1`` checkpoints."""
from __future__ import annotations

import enum
import io
import math
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .data import Batch, atomic_write, augment, collate
from .errors import (
    BadMagic,
    LabelOutOfRange,
    NumericFailure,
    ShapeMismatch,
    TooFewSamples,
    VersionMismatch,
)
from .fusion import MultimodalModel
from .tensor import Rng, read_exact, read_tensor, splitmix64, write_tensor

CHECKPOINT_MAGIC = b"MMF1"
CHECKPOINT_VERSION = 1
IMPROVEMENT_THRESHOLD = 1e-6


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 32
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)
    patience: int = 10
    lr_decay_factor: float = 0.5
    lr_decay_every: int = 20
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if len(self.split) != 3 or any(f <= 0 for f in self.split) or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError("split fractions must be positive and sum to 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")
        if self.batch_size < 1 or self.lr_decay_every < 1 or self.patience < 1 or self.max_epochs < 0:
            raise ValueError("batch_size, lr_decay_every and patience must be positive")


def cross_entropy(probs, label: int) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[-1]:
        raise LabelOutOfRange(f"label {label} with {probs.shape[-1]} classes")
    return float(-math.log(max(probs[label], ag.CE_CLAMP)))


# --- Adam ---------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: Mapping, state: AdamState, lr: float) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {g.shape} for parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def decay_lr(epoch: int, config: TrainConfig) -> float:
    return config.lr * config.lr_decay_factor ** (epoch // config.lr_decay_every)


# --- early stopping -----------------------------------------------------------


class StopDecision(enum.Enum):
    CONTINUE = "continue"
    STOP = "stop"


@dataclass
class EarlyStopState:
    best_val_loss: float = math.inf
    epochs_since_improve: int = 0
    best_snapshot: dict | None = None
    best_epoch: int = -1
    epoch: int = -1


def early_stop_update(state: EarlyStopState, val_loss: float, patience: int,
                      params: Mapping[str, np.ndarray] | None = None) -> StopDecision:
    state.epoch += 1
    if val_loss < state.best_val_loss - IMPROVEMENT_THRESHOLD:
        state.best_val_loss = val_loss
        state.epochs_since_improve = 0
        state.best_epoch = state.epoch
        if params is not None:
            state.best_snapshot = {k: v.copy() for k, v in params.items()}
        return StopDecision.CONTINUE
    state.epochs_since_improve += 1
    return StopDecision.STOP if state.epochs_since_improve >= patience else StopDecision.CONTINUE


# --- splitting ----------------------------------------------------------------


def split_dataset(samples: Sequence, config: TrainConfig, rng: Rng):
    """Fisher-Yates shuffle then contiguous cuts at floor(0.70 n) and floor(0.85 n)."""
    n = len(samples)
    if n < 3:
        raise TooFewSamples(f"need at least 3 samples, got {n}")
    order = rng.permutation(n)
    a = math.floor(config.split[0] * n + 1e-9)
    b = math.floor((config.split[0] + config.split[1]) * n + 1e-9)
    pick = lambda idx: [samples[i] for i in idx]
    return pick(order[:a]), pick(order[a:b]), pick(order[b:])


# --- training loop ------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class TrainReport:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,lr"]
        lines += [f"{e.epoch},{e.train_loss!r},{e.val_loss!r},{e.lr!r}" for e in self.epochs]
        return "\n".join(lines) + "\n"


def _subset(batch: Batch, idx) -> Batch:
    take = lambda a: None if a is None else a[idx]
    return Batch(take(batch.images), take(batch.tokens), take(batch.structured), batch.labels[idx])


def batch_loss(model: MultimodalModel, batch: Batch) -> float:
    tape = Tape()
    probs, _, _ = model.forward(tape, batch)
    return float(ag.cross_entropy(probs, batch.labels).value[0])


def train(model: MultimodalModel, train_samples, val_samples, config: TrainConfig,
          augmentations: Sequence[str] = ()) -> TrainReport:
    """Train ``model`` in place and restore the best validation snapshot.

    The last partial batch is kept. When the validation split is empty the
    training loss drives early stopping.
    """
    report = TrainReport()
    if config.max_epochs == 0:
        return report
    max_len = model.config.max_len
    data = collate(train_samples, max_len)
    val = collate(val_samples, max_len) if len(val_samples) else None
    rng = Rng(splitmix64(config.seed ^ 0x7EA1))
    adam = AdamState()
    stop = EarlyStopState()
    n = len(data)
    for epoch in range(config.max_epochs):
        lr = decay_lr(epoch, config)
        order = np.array(rng.permutation(n))
        losses = []
        for start in range(0, n, config.batch_size):
            batch = _subset(data, order[start:start + config.batch_size])
            if augmentations and batch.images is not None:
                batch.images = np.stack([augment(im, rng, augmentations) for im in batch.images])
            tape = Tape()
            probs, P, _ = model.forward(tape, batch)
            loss = ag.cross_entropy(probs, batch.labels)
            value = float(loss.value[0])
            if not math.isfinite(value):
                raise NumericFailure(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            adam_step(model.params, {k: v.grad for k, v in P.items()}, adam, lr)
            losses.append(value)
        train_loss = float(np.mean(losses))
        val_loss = batch_loss(model, val) if val is not None else train_loss
        if not math.isfinite(val_loss):
            raise NumericFailure(f"non-finite validation loss at epoch {epoch}")
        report.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr))
        if early_stop_update(stop, val_loss, config.patience, model.params) is StopDecision.STOP:
            report.stopped_early = True
            break
    if stop.best_snapshot is not None:
        model.params = stop.best_snapshot
    report.best_epoch = stop.best_epoch
    report.best_val_loss = stop.best_val_loss
    return report


# --- checkpoints ----------------------------------------------------------------


def dump_checkpoint(fh, params: Mapping[str, np.ndarray]) -> None:
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
    for name, value in params.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        write_tensor(fh, value)


def save_checkpoint(path, params: Mapping[str, np.ndarray]) -> None:
    atomic_write(path, lambda fh: dump_checkpoint(fh, params))


def read_checkpoint(fh) -> dict[str, np.ndarray]:
    if read_exact(fh, 4) != CHECKPOINT_MAGIC:
        raise BadMagic("expected an MMF1 checkpoint")
    version, count = struct.unpack("<II", read_exact(fh, 8))
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"MMF1 version {version}, expected {CHECKPOINT_VERSION}")
    params = {}
    for _ in range(count):
        (size,) = struct.unpack("<H", read_exact(fh, 2))
        name = read_exact(fh, size).decode("utf-8")
        params[name] = read_tensor(fh)
    return params


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)


def checkpoint_bytes(params: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    dump_checkpoint(buf, params)
    return buf.getvalue()
