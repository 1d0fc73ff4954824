"""MAE boundary loss, Adam, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .data import BoundaryTargets, Sample, SampleDataset, SceneDataset, stack_samples
from .model import (
    BoundaryPrediction,
    ModelConfig,
    ModelParams,
    forward,
    init_params,
    map_params,
    named_tensors,
    watch_params,
)
from .tensor import ShapeError, Tape, Tensor, as_tensor

log = logging.getLogger(__name__)

NUM_QUANTITIES = 62  # 60 column heights + left + right


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN or infinite loss."""


def mae_loss(pred: BoundaryPrediction, target) -> Tensor:
    """Mean absolute error over the 62 boundary quantities, averaged over the batch.

    ``target`` is a :class:`BoundaryTargets` or a ``(left, right, top)`` triple of
    arrays with a matching leading batch axis.
    """
    if isinstance(target, BoundaryTargets):
        left, right, top = target.left, target.right, target.top
    else:
        left, right, top = target
    p_top, p_left, p_right = as_tensor(pred.top), as_tensor(pred.left), as_tensor(pred.right)
    top = np.asarray(top, dtype=p_top.dtype)
    if p_top.shape != top.shape:
        raise ShapeError(f"predicted top {p_top.shape} vs target {top.shape}")
    dtype = top.dtype
    per_sample = ((p_top - top).abs().sum(axis=-1)
                  + (p_left - np.asarray(left, dtype)).abs()
                  + (p_right - np.asarray(right, dtype)).abs()) * (1.0 / NUM_QUANTITIES)
    return per_sample.mean()


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, lr: float = 1e-4, **kwargs) -> "AdamState":
        named = _as_named(params)
        return cls(m={k: np.zeros_like(v) for k, v in named.items()},
                   v={k: np.zeros_like(v) for k, v in named.items()}, lr=lr, **kwargs)


def _as_named(params) -> dict[str, np.ndarray]:
    return params if isinstance(params, dict) else named_tensors(params)


def adam_step(params, grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected Adam update.  Returns ``(new_params, new_state)``.

    ``params`` may be a :class:`ModelParams` tree or a flat name->array dict;
    the result has the same form.  Inputs are not modified.
    """
    named = _as_named(params)
    if set(grads) != set(named):
        raise ShapeError(f"gradient names differ from parameters: "
                         f"{sorted(set(grads) ^ set(named))}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new, m_new, v_new = {}, {}, {}
    for name, theta in named.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {theta.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new[name] = (theta - step).astype(theta.dtype)
        m_new[name], v_new[name] = m.astype(theta.dtype), v.astype(theta.dtype)
    new_state = AdamState(m_new, v_new, t, state.lr, b1, b2, state.eps)
    if isinstance(params, dict):
        return new, new_state
    return map_params(params, lambda name, _: new[name]), new_state


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 125
    epochs: int = 80
    lr: float = 1e-4
    val_fraction: float = 0.015
    seed: int = 0
    checkpoint_path: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig)
    eval_batch_size: int = 25

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


@dataclass
class EpochRecord:
    epoch: int
    train_mae: float
    val_mae: float


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: list[EpochRecord]
    best_epoch: int
    train_scenes: list[str]
    val_scenes: list[str]

    def write_csv(self, path) -> Path:
        return write_history(self.history, path)


def write_history(history: Sequence[EpochRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mae", "val_mae"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_mae), repr(r.val_mae)])
    return path


def split_scenes(scene_ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Disjoint (train, validation) scene lists; at least one scene each when possible."""
    ids = sorted(set(scene_ids))
    if not ids:
        raise ValueError("dataset is empty")
    if len(ids) == 1 or val_fraction == 0:
        return ids, []
    n_val = min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
    order = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in order[:n_val])
    train = sorted(ids[i] for i in order[n_val:])
    return train, val


def _batches(n: int, size: int) -> list[slice]:
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def loss_and_grads(params: ModelParams, samples: Sequence[Sample]) -> tuple[float, dict[str, np.ndarray]]:
    x, left, right, top = stack_samples(samples)
    tape = Tape()
    pred = forward(x.astype(_param_dtype(params)), watch_params(params, tape))
    loss = mae_loss(pred, (left, right, top))
    return loss.item(), tape.backward(loss)


def _param_dtype(params: ModelParams):
    return params.encoder.conv1.kernel.dtype


def evaluate_mae(params: ModelParams, samples: Sequence[Sample], batch_size: int = 25) -> float:
    """Sample-weighted MAE without recording a tape."""
    if not samples:
        return float("nan")
    total = 0.0
    for sl in _batches(len(samples), batch_size):
        x, left, right, top = stack_samples(samples[sl])
        pred = forward(x.astype(_param_dtype(params)), params)
        total += mae_loss(pred, (left, right, top)).item() * len(samples[sl])
    return total / len(samples)


def _as_dataset(dataset):
    if isinstance(dataset, (SampleDataset, SceneDataset)):
        return dataset
    return SampleDataset(list(dataset))


def train(dataset, config: TrainConfig, params: ModelParams | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train with Adam on mean per-batch gradients; keep the best-validation weights.

    ``dataset`` is a list of samples, a :class:`SampleDataset` or a
    :class:`SceneDataset`.  Scenes are split into train/validation before any
    views are produced, so no scene contributes to both sides.  Validation uses
    one fixed full-frame view per held-out scene for scene datasets.
    """
    ds = _as_dataset(dataset)
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    train_ids, val_ids = split_scenes(ds.scene_ids(), config.val_fraction, config.seed)
    train_ds = ds.subset(train_ids)
    val_ds = ds.subset(val_ids)
    if isinstance(val_ds, SceneDataset):
        val_samples = val_ds.fixed_samples()
    else:
        val_samples = val_ds.epoch_samples(0)

    if params is None:
        params = init_params(config.model, seed=config.seed)
    state = AdamState.fresh(params, lr=config.lr)
    rng = np.random.default_rng(config.seed)
    best, best_epoch, best_val = params, 0, math.inf
    history: list[EpochRecord] = []

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        samples = train_ds.epoch_samples(epoch)
        order = rng.permutation(len(samples))
        total = 0.0
        for sl in _batches(len(samples), config.batch_size):
            batch = [samples[i] for i in order[sl]]
            loss, grads = loss_and_grads(params, batch)
            if not math.isfinite(loss):
                raise NonFiniteLossError(f"non-finite loss {loss} at epoch {epoch}")
            params, state = adam_step(params, grads, state)
            total += loss * len(batch)
        train_mae = total / len(samples)
        val_mae = evaluate_mae(params, val_samples, config.eval_batch_size) if val_samples else train_mae
        if not math.isfinite(val_mae):
            raise NonFiniteLossError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, train_mae, val_mae)
        history.append(rec)
        if val_mae < best_val:
            best, best_epoch, best_val = params, epoch, val_mae
            if config.checkpoint_path:
                save_checkpoint(best, config.checkpoint_path)
        log.info("epoch %d train_mae %.5f val_mae %.5f (%.1fs)", epoch, train_mae, val_mae,
                 time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(rec)

    return TrainResult(params, best, history, best_epoch, train_ids, val_ids)
