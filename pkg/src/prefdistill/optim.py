"""AdamW with per-step exponential learning-rate decay, gradient accumulation,
early stopping, and the PDS1 optimizer-state format."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .embeddings import MIN_NORM, CatalogStore
from .errors import BadMagic, DimensionMismatch, PrematureStep, ShapeMismatch, TruncatedFile

STATE_MAGIC = b"PDS1"
_STATE_HEADER = struct.Struct("<4sIIQ")


@dataclass
class AdamWConfig:
    lr0: float = 1e-6
    decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    accumulation_steps: int = 10
    micro_batch: int = 50

    def __post_init__(self):
        if not 0.0 < self.decay <= 1.0:
            raise ValueError(f"decay must be in (0, 1], got {self.decay}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.accumulation_steps < 1 or self.micro_batch < 1:
            raise ValueError("accumulation_steps and micro_batch must be >= 1")
        if self.lr0 < 0 or self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("lr0, eps and weight_decay must be non-negative (eps > 0)")


def lr_at(t: int, config: AdamWConfig) -> float:
    """Learning rate after ``t`` completed optimizer steps."""
    return config.lr0 * config.decay**t


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    buffer: np.ndarray | None = None
    micro_steps: int = 0

    @classmethod
    def zeros(cls, n: int, dim: int) -> "AdamWState":
        return cls(np.zeros((n, dim), np.float32), np.zeros((n, dim), np.float32))

    @property
    def shape(self):
        return self.m.shape

    def touched_rows(self) -> np.ndarray:
        return np.flatnonzero(np.any(self.v != 0, axis=1) | np.any(self.m != 0, axis=1))


def accumulate(state: AdamWState, grad, rows=None):
    """Add a gradient contribution into the accumulation buffer.

    ``grad`` is either a dense (N, D) array or, with ``rows``, a (k, D) block for
    those row indices.
    """
    if state.buffer is None:
        state.buffer = np.zeros(state.shape, np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if rows is None:
        if grad.shape != state.shape:
            raise ShapeMismatch(f"gradient {grad.shape} vs parameters {state.shape}")
        state.buffer += grad
    else:
        rows = np.asarray(rows, dtype=np.intp)
        if grad.shape != (rows.size, state.shape[1]):
            raise ShapeMismatch(f"gradient block {grad.shape} for {rows.size} rows")
        np.add.at(state.buffer, rows, grad)
    state.micro_steps += 1


def accumulate_sparse(state: AdamWState, store: CatalogStore, grads: dict):
    """Accumulate an id-keyed gradient (as produced by ``batch_loss_grad``)."""
    if grads:
        rows = store.rows_for(grads.keys())
        accumulate(state, np.stack(list(grads.values())), rows)
    else:
        accumulate(state, np.zeros((0, state.shape[1])), np.zeros(0, np.intp))


def apply_step(store: CatalogStore, state: AdamWState, config: AdamWConfig, flush: bool = False):
    """One AdamW update of ``store.raw`` from the accumulated gradient.

    Moments and parameters are stored as float32; arithmetic is float64.
    Rows never touched have m = v = 0 and therefore receive no Adam update.
    """
    if state.micro_steps != config.accumulation_steps and not (flush and state.micro_steps > 0):
        raise PrematureStep(
            f"{state.micro_steps}/{config.accumulation_steps} micro-batches accumulated"
        )
    if state.shape != store.raw.shape:
        raise ShapeMismatch(f"state {state.shape} vs parameters {store.raw.shape}")
    grad = state.buffer if state.buffer is not None else np.zeros(state.shape)
    lr = lr_at(state.t, config)
    t = state.t + 1

    m = config.beta1 * state.m.astype(np.float64) + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v.astype(np.float64) + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)

    theta = store.raw.astype(np.float64)
    update = -lr * m_hat / (np.sqrt(v_hat) + config.eps)
    if config.weight_decay:
        update -= lr * config.weight_decay * theta
    new = theta + update

    norms = np.sqrt(np.sum(new * new, axis=1))
    small = norms < MIN_NORM
    if small.any():
        # keep direction, clamp magnitude; fall back to the old direction at exactly zero
        direction = np.where(norms[small, None] > 0, new[small], theta[small])
        dn = np.sqrt(np.sum(direction * direction, axis=1))
        new[small] = direction / dn[:, None] * MIN_NORM * (1 + 1e-6)

    changed = np.flatnonzero(np.any(update != 0, axis=1) | small)
    store.raw[...] = new.astype(store.raw.dtype)
    state.m = m.astype(np.float32)
    state.v = v.astype(np.float32)
    state.t = t
    state.buffer = None
    state.micro_steps = 0
    store.mark_dirty(changed)
    store.refresh()
    return store


def save_state(state: AdamWState, path):
    n, d = state.shape
    with open(path, "wb") as f:
        f.write(_STATE_HEADER.pack(STATE_MAGIC, n, d, state.t))
        f.write(np.ascontiguousarray(state.m, dtype="<f4").tobytes())
        f.write(np.ascontiguousarray(state.v, dtype="<f4").tobytes())


def load_state(path) -> AdamWState:
    data = Path(path).read_bytes()
    if data[:4] != STATE_MAGIC:
        raise BadMagic(f"{path}: expected {STATE_MAGIC!r}, got {data[:4]!r}")
    if len(data) < _STATE_HEADER.size:
        raise TruncatedFile(f"{path}: short header")
    _, n, d, t = _STATE_HEADER.unpack_from(data)
    expected = _STATE_HEADER.size + 2 * 4 * n * d
    if len(data) < expected:
        raise TruncatedFile(f"{path}: need {expected} bytes, have {len(data)}")
    if len(data) > expected:
        raise DimensionMismatch(f"{path}: trailing bytes")
    off = _STATE_HEADER.size
    m = np.frombuffer(data, "<f4", n * d, off).reshape(n, d).astype(np.float32)
    v = np.frombuffer(data, "<f4", n * d, off + 4 * n * d).reshape(n, d).astype(np.float32)
    return AdamWState(m, v, int(t))


@dataclass
class EarlyStopper:
    """Maximizing early stopper: Stop once ``patience`` evaluations in a row fail
    to strictly improve on the best value seen."""

    patience: int = 5
    best_metric: float | None = None
    best_tag: str | None = None
    steps_since_best: int = 0
    evaluations: int = 0
    history: list = field(default_factory=list)

    CONTINUE = "continue"
    STOP = "stop"

    def update(self, metric: float, tag=None) -> str:
        self.evaluations += 1
        self.history.append(float(metric))
        if self.best_metric is None or metric > self.best_metric:
            self.best_metric = float(metric)
            self.best_tag = None if tag is None else str(tag)
            self.steps_since_best = 0
        else:
            self.steps_since_best += 1
        return self.STOP if self.should_stop else self.CONTINUE

    @property
    def should_stop(self) -> bool:
        return self.steps_since_best >= self.patience

    @property
    def improved(self) -> bool:
        return self.evaluations > 0 and self.steps_since_best == 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EarlyStopper":
        return cls(**d)


def early_stop_update(stopper: EarlyStopper, metric: float, tag=None) -> str:
    return stopper.update(metric, tag)
