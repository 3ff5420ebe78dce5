"""Residual loss, Adam, patch sampling and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .network import Model, backward_residual, commit_bn_states, forward_with_cache
from .prefetch import BatchPrefetcher
from .tensor_core import ShapeError, is_valid


logger = logging.getLogger(__name__)

Pair = Tuple[np.ndarray, np.ndarray]

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MOVING_OBJECT_RESIZE = (0.7, 1.0)


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""

    def __init__(self, message: str, trace: Optional[List["LossRecord"]] = None) -> None:
        super().__init__(message)
        self.trace = trace or []


@dataclass(frozen=True, slots=True)
class TrainingConfig:
    batch_size: int = 128
    patch_size: int = 80
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    epochs: int = 1000
    seed: int = 0
    resize_augment: Optional[Tuple[float, float]] = None
    steps_per_epoch: Optional[int] = None
    prefetch: int = 2

    def __post_init__(self) -> None:
        if self.batch_size < 1 or self.patch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size, patch_size and epochs must be positive")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError(f"need 0 < lr_end <= lr_start, got {self.lr_end} / {self.lr_start}")
        if self.resize_augment is not None:
            low, high = self.resize_augment
            if not 0 < low <= high:
                raise ValueError(f"invalid resize range {self.resize_augment}")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be positive")


@dataclass(slots=True)
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params])


@dataclass(frozen=True, slots=True)
class LossRecord:
    epoch: int
    step: int
    lr: float
    loss: float


@dataclass(slots=True)
class TrainingResult:
    model: Model
    adam: AdamState
    trace: List[LossRecord] = field(default_factory=list)
    seconds: float = 0.0


def loss(residual_pred: np.ndarray, y_batch: np.ndarray, x_batch: np.ndarray) -> Tuple[float, np.ndarray]:
    """``1/(2m) * sum_i ||R_i - (y_i - x_i)||^2`` and its gradient w.r.t. ``R``."""

    if not residual_pred.shape == y_batch.shape == x_batch.shape:
        raise ShapeError(
            f"loss shapes differ: pred {residual_pred.shape}, y {y_batch.shape}, x {x_batch.shape}"
        )
    m = residual_pred.shape[0] if residual_pred.ndim else 1
    diff = residual_pred - (y_batch - x_batch)
    value = 0.5 / m * float(np.sum(np.square(diff, dtype=np.float64)))
    return value, (diff / m).astype(residual_pred.dtype, copy=False)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
) -> Tuple[Sequence[np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""

    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state must have the same length")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for param, grad, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(grad)
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(param.dtype, copy=False)
    return params, state


def lr_schedule(epoch: int, config: TrainingConfig) -> float:
    """Log-linear decay from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""

    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch == 0:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    fraction = epoch / (config.epochs - 1)
    return config.lr_start * (config.lr_end / config.lr_start) ** fraction


def augment_resize(
    pair: Pair,
    scale: Optional[float] = None,
    *,
    scale_range: Tuple[float, float] = MOVING_OBJECT_RESIZE,
    seed: Optional[int] = None,
    min_size: Optional[int] = None,
) -> Pair:
    """Rescale ``y`` and ``x`` by one factor with bilinear interpolation.

    When ``scale`` is omitted it is drawn uniformly from ``scale_range``.
    """

    if scale is None:
        scale = float(np.random.default_rng(seed).uniform(*scale_range))
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    y, x = pair
    if y.shape != x.shape:
        raise ShapeError(f"pair shapes differ: {y.shape} vs {x.shape}")
    if scale == 1.0:
        return y.copy(), x.copy()

    factors = (1.0,) * (y.ndim - 2) + (scale, scale)
    y_out = ndimage.zoom(y, factors, order=1, mode="nearest")
    x_out = ndimage.zoom(x, factors, order=1, mode="nearest")
    if min_size is not None and min(y_out.shape[-2:]) < min_size:
        raise ShapeError(
            f"resized frame {y_out.shape[-2:]} is smaller than patch size {min_size} (scale={scale})"
        )
    return y_out, x_out


def _check_pairs(pairs: Sequence[Pair], patch: int) -> None:
    if not pairs:
        raise ValueError("no training pairs")
    for index, (y, x) in enumerate(pairs):
        if y.shape != x.shape:
            raise ShapeError(f"pair {index}: y shape {y.shape} != x shape {x.shape}")
        height, width = y.shape[-2:]
        if height < patch or width < patch:
            raise ShapeError(f"pair {index}: image {height}x{width} smaller than patch {patch}")


def sample_patches(
    pairs: Sequence[Pair],
    patch: int,
    count: int,
    seed: int,
    *,
    resize_range: Optional[Tuple[float, float]] = None,
) -> Pair:
    """Uniform random aligned crops, stacked to ``[count, C, patch, patch]``."""

    _check_pairs(pairs, patch)
    rng = np.random.default_rng(seed)
    channels = pairs[0][0].shape[0]
    dtype = pairs[0][0].dtype
    y_batch = np.empty((count, channels, patch, patch), dtype=dtype)
    x_batch = np.empty_like(y_batch)
    for i in range(count):
        y, x = pairs[int(rng.integers(len(pairs)))]
        if resize_range is not None:
            smallest = min(y.shape[-2:])
            low = min(max(resize_range[0], patch / smallest), resize_range[1])
            y, x = augment_resize((y, x), float(rng.uniform(low, resize_range[1])), min_size=patch)
        height, width = y.shape[-2:]
        top = int(rng.integers(height - patch + 1))
        left = int(rng.integers(width - patch + 1))
        y_batch[i] = y[:, top:top + patch, left:left + patch]
        x_batch[i] = x[:, top:top + patch, left:left + patch]
    return y_batch, x_batch


def steps_per_epoch(pairs: Sequence[Pair], config: TrainingConfig) -> int:
    """Batches per epoch, from patches on a half-patch stride grid."""

    if config.steps_per_epoch is not None:
        return config.steps_per_epoch
    patch = config.patch_size
    stride = max(1, patch // 2)
    available = 0
    for y, _ in pairs:
        height, width = y.shape[-2:]
        available += ((height - patch) // stride + 1) * ((width - patch) // stride + 1)
    return max(1, math.ceil(available / config.batch_size))


def batch_seed(seed: int, step: int) -> int:
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def compute_gradients(model: Model, y_batch: np.ndarray, x_batch: np.ndarray):
    """Train-mode forward, loss and backward: ``(loss, grads, bn_states)``."""

    residual, cache = forward_with_cache(model, y_batch, "train")
    value, grad = loss(residual, y_batch, x_batch)
    grads = backward_residual(model, grad, cache)
    return value, grads, cache.bn_states


def write_loss_csv(trace: Sequence[LossRecord], path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "step", "lr", "loss"])
        for record in trace:
            writer.writerow([record.epoch, record.step, repr(record.lr), repr(record.loss)])


def train(
    model: Model,
    pairs: Sequence[Pair],
    config: TrainingConfig,
    *,
    adam: Optional[AdamState] = None,
) -> TrainingResult:
    """Run ``epochs x steps`` of sample, forward, loss, backprop and Adam.

    The model is updated in place. Resuming with a loaded ``adam`` state keeps
    the global step counter increasing.
    """

    _check_pairs(pairs, config.patch_size)
    pairs = [(y.astype(model.dtype, copy=False), x.astype(model.dtype, copy=False)) for y, x in pairs]
    if pairs[0][0].shape[0] != model.config.in_channels:
        raise ShapeError(
            f"training pairs have {pairs[0][0].shape[0]} channels, model expects {model.config.in_channels}"
        )
    if config.patch_size < model.config.receptive_field:
        logger.warning(
            "Patch size %d is smaller than the receptive field %d",
            config.patch_size,
            model.config.receptive_field,
        )

    params = model.parameters()
    adam = adam or AdamState.zeros_like(params)
    steps = steps_per_epoch(pairs, config)
    first_step = adam.t
    trace: List[LossRecord] = []
    logger.info(
        "Training %d epochs x %d steps (batch %d, patch %d, starting at step %d)",
        config.epochs,
        steps,
        config.batch_size,
        config.patch_size,
        first_step,
    )

    def make_batch(step: int) -> Pair:
        return sample_patches(
            pairs,
            config.patch_size,
            config.batch_size,
            batch_seed(config.seed, step),
            resize_range=config.resize_augment,
        )

    started = time.perf_counter()
    all_steps = range(first_step, first_step + config.epochs * steps)
    prefetcher = BatchPrefetcher(make_batch, all_steps, max_size=config.prefetch)
    epoch_losses: List[float] = []
    for step, (y_batch, x_batch) in prefetcher:
        epoch = (step - first_step) // steps
        lr = lr_schedule(epoch, config)
        value, grads, states = compute_gradients(model, y_batch, x_batch)
        if not math.isfinite(value) or not all(is_valid(g) for g in grads):
            prefetcher.stop()
            what = "loss" if not math.isfinite(value) else "gradient"
            raise NumericalError(
                f"non-finite {what} at epoch {epoch}, step {step}, lr {lr:.3e}", trace=trace
            )
        adam_step(params, grads, adam, lr)
        commit_bn_states(model, states)
        trace.append(LossRecord(epoch=epoch, step=step, lr=lr, loss=value))
        epoch_losses.append(value)

        if len(epoch_losses) == steps:
            logger.info("Epoch %d/%d lr=%.3e loss=%.6f", epoch + 1, config.epochs, lr, float(np.mean(epoch_losses)))
            epoch_losses.clear()

    return TrainingResult(model=model, adam=adam, trace=trace, seconds=time.perf_counter() - started)
