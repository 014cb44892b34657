"""Residual objective, Adam, the learning-rate schedule and the epoch loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import network
from .data import PatchSet, make_batches
from .errors import ConfigError, ShapeError, StateError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    sigma: float = 25.0
    epochs: int = 180
    batch_size: int = 128
    lr_start: float = 1e-3
    lr_end: float = 1e-8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch_size: int = 40
    stride: int = 10
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ConfigError("need 0 < lr_end <= lr_start")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not self.eps > 0:
            raise ConfigError("Adam eps must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.sigma < 0:
            raise ConfigError("sigma must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def _check_same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"shape mismatch: {sorted(shapes)}")


def squared_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """``sum ||pred_j - target_j||^2 / (2N)`` over a batch of N items."""
    _check_same_shape(pred, target)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return float(np.dot(diff.ravel(), diff.ravel()) / (2 * pred.shape[0]))


def squared_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    _check_same_shape(pred, target)
    diff = pred.astype(np.float64) - target.astype(np.float64)
    return (diff / pred.shape[0]).astype(pred.dtype)


def residual_loss(residual_pred: np.ndarray, noisy: np.ndarray, clean: np.ndarray) -> float:
    _check_same_shape(residual_pred, noisy, clean)
    return squared_loss(residual_pred, noisy.astype(np.float64) - clean)


def residual_loss_grad(residual_pred: np.ndarray, noisy: np.ndarray, clean: np.ndarray) -> np.ndarray:
    _check_same_shape(residual_pred, noisy, clean)
    return squared_loss_grad(residual_pred, noisy.astype(np.float64) - clean)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    if set(grads) != set(params):
        raise StateError("gradient keys do not match parameter keys")
    for k, g in grads.items():
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient for {k} has shape {g.shape}, parameter has {params[k].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergedError(f"non-finite gradient for {k}")
    if not state.m:
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
    if set(state.m) != set(params):
        raise StateError("optimizer state does not match the parameter set")

    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k].astype(np.float64)
        m = beta1 * state.m[k].astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * state.v[k].astype(np.float64) + (1.0 - beta2) * (g * g)
        p[...] = p.astype(np.float64) - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        state.m[k][...] = m
        state.v[k][...] = v
    return state


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Geometric interpolation from lr_start (first epoch) to lr_end (last epoch)."""
    if not 0 <= epoch < config.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {config.epochs})")
    if config.epochs == 1 or epoch == 0:
        return config.lr_start
    if epoch == config.epochs - 1:
        return config.lr_end
    return config.lr_start * (config.lr_end / config.lr_start) ** (epoch / (config.epochs - 1))


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    batches: int
    lr: float


def train_step(model: network.Model, clean: np.ndarray, noisy: np.ndarray, state: AdamState,
               config: TrainConfig, lr: float) -> float:
    pred, caches = network.forward(model, noisy, "train")
    target = model.target(noisy, clean)
    loss = squared_loss(pred, target)
    if not math.isfinite(loss):
        raise TrainingDivergedError("non-finite loss")
    grads = network.backward(model, caches, squared_loss_grad(pred, target))
    adam_step(state, model.parameter_dict(), grads, lr, config.beta1, config.beta2, config.eps)
    model.version += 1
    return loss


def train_epoch(model: network.Model, patches: PatchSet, state: AdamState, config: TrainConfig,
                epoch: int) -> EpochMetrics:
    """One shuffled pass over ``patches``; the mean loss is weighted by batch size."""
    if len(patches) == 0:
        raise ConfigError("empty patch set")
    lr = lr_at_epoch(config, epoch)
    total, count, nbatches = 0.0, 0, 0
    for b, (clean, noisy) in enumerate(make_batches(patches, config.batch_size, config.seed, epoch)):
        try:
            loss = train_step(model, clean, noisy, state, config, lr)
        except TrainingDivergedError as exc:
            raise TrainingDivergedError(f"epoch {epoch}, batch {b}: {exc}") from exc
        total += loss * clean.shape[0]
        count += clean.shape[0]
        nbatches += 1
    metrics = EpochMetrics(epoch, total / count, nbatches, lr)
    log.info("epoch %d loss %.6f lr %.3e", epoch + 1, metrics.mean_loss, lr)
    return metrics
