"""Cross-entropy objective, exact gradients, Adam updates, and the training loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import InvalidConfigError, NumericFaultError, ShapeError
from .ingest import ClipDataset
from .model import ModelParams, model_backward, model_forward, softmax
from .types import NUM_ACTIONS


def cross_entropy(probabilities: np.ndarray, labels: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes.

    Takes already-normalized probability rows; training itself uses the fused
    log-softmax path in `loss_and_grads` for stability.
    """
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if probabilities.ndim != 2 or probabilities.shape[1] != NUM_ACTIONS:
        raise ShapeError(f"expected (batch, {NUM_ACTIONS}) probabilities, got {probabilities.shape}")
    if labels.min() < 0 or labels.max() >= NUM_ACTIONS:
        raise ShapeError(f"label outside [0, {NUM_ACTIONS})")
    picked = probabilities[np.arange(len(labels)), labels]
    return float(-np.log(picked).mean())


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def batch_loss(
    features: np.ndarray, mask: np.ndarray, labels: np.ndarray, params: ModelParams
) -> float:
    """Mean cross-entropy of one batch, computed in the log domain."""
    _, logits, _ = model_forward(features, mask, params)
    logp = _log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_and_grads(
    features: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    want_input_grad: bool = False,
) -> tuple[float, dict[str, np.ndarray], Optional[np.ndarray]]:
    """Mean batch loss plus the gradient of every parameter tensor."""
    if len(labels) == 0:
        raise InvalidConfigError("empty batch")
    probs, logits, cache = model_forward(features, mask, params)
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(len(labels)), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    grads, dfeatures = model_backward(dlogits, cache, params, want_input_grad)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericFaultError(f"non-finite gradient in {name}")
    if not np.isfinite(loss):
        raise NumericFaultError("non-finite loss")
    return loss, grads, dfeatures


def backward(
    features: np.ndarray, mask: np.ndarray, labels: np.ndarray, params: ModelParams
) -> tuple[float, dict[str, np.ndarray]]:
    loss, grads, _ = loss_and_grads(features, mask, labels, params)
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamHyper:
    step_size: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.named_arrays()},
            v={k: np.zeros_like(a) for k, a in params.named_arrays()},
        )


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    hyper: AdamHyper = AdamHyper(),
) -> None:
    """Bias-corrected Adam update, applied to the parameter tensors in place."""
    state.t += 1
    t = state.t
    for name, arr in params.named_arrays():
        g = grads[name]
        state.m[name] = hyper.beta1 * state.m[name] + (1.0 - hyper.beta1) * g
        state.v[name] = hyper.beta2 * state.v[name] + (1.0 - hyper.beta2) * g * g
        m_hat = state.m[name] / (1.0 - hyper.beta1**t)
        v_hat = state.v[name] / (1.0 - hyper.beta2**t)
        arr -= hyper.step_size * m_hat / (np.sqrt(v_hat) + hyper.epsilon)


# ---------------------------------------------------------------------------
# Early stopping and the training loop
# ---------------------------------------------------------------------------


class EarlyStopper:
    """Stop after `patience` epochs without an improvement larger than `min_delta`.

    "Best" means the last epoch that actually improved by more than min_delta,
    so sub-threshold drift never moves the snapshot.
    """

    def __init__(self, patience: int = 50, min_delta: float = 1e-6):
        if patience < 1:
            raise InvalidConfigError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = np.inf
        self.best_epoch = -1
        self.stale = 0

    def update(self, val_loss: float, epoch: int) -> bool:
        """Record one epoch; returns True when this epoch becomes the new best."""
        if self.best_loss - val_loss > self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


@dataclass
class TrainConfig:
    batch_size: int = 512
    step_size: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    patience: int = 50
    min_delta: float = 1e-6
    max_epochs: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if self.step_size <= 0:
            raise InvalidConfigError(f"step size must be positive, got {self.step_size}")
        if self.patience < 1:
            raise InvalidConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidConfigError("batch_size and max_epochs must be >= 1")


@dataclass
class TrainReport:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = -1
    best_val_loss: float = np.inf
    aborted: bool = False

    def rows(self) -> list[tuple[int, float, float, float]]:
        return [
            (e + 1, tr, vl, sec)
            for e, (tr, vl, sec) in enumerate(
                zip(self.train_losses, self.val_losses, self.epoch_seconds)
            )
        ]


def train(
    dataset: ClipDataset,
    params: ModelParams,
    config: TrainConfig,
    progress: Optional[Callable[[int, float, float], None]] = None,
) -> tuple[ModelParams, TrainReport]:
    """Mini-batch Adam training with early stopping and best-weight restore.

    Iterates the dataset's (already oversampled) train indices in a fresh
    seeded order each epoch; validates on the val split after every epoch.
    """
    if len(dataset.train_idx) == 0 or len(dataset.val_idx) == 0:
        raise InvalidConfigError("train and val splits must be non-empty")
    hyper = AdamHyper(config.step_size, config.beta1, config.beta2, config.epsilon)
    state = AdamState.for_params(params)
    stopper = EarlyStopper(config.patience, config.min_delta)
    report = TrainReport()
    best_snapshot = params.clone()
    rng = np.random.default_rng(config.seed)
    val_feats, val_mask, val_labels = dataset.subset(dataset.val_idx)
    train_idx = dataset.train_idx
    for epoch in range(1, config.max_epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(len(train_idx))
        epoch_loss = 0.0
        n_batches = 0
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = train_idx[order[lo : lo + config.batch_size]]
                feats, mask, labels = dataset.subset(batch)
                loss, grads = backward(feats, mask, labels, params)
                adam_step(params, grads, state, hyper)
                epoch_loss += loss
                n_batches += 1
            val_loss = batch_loss(val_feats, val_mask, val_labels, params)
        except NumericFaultError:
            report.aborted = True
            report.stop_epoch = epoch
            break
        report.train_losses.append(epoch_loss / max(n_batches, 1))
        report.val_losses.append(val_loss)
        report.epoch_seconds.append(time.perf_counter() - started)
        if stopper.update(val_loss, epoch):
            best_snapshot = params.clone()
        if progress is not None:
            progress(epoch, report.train_losses[-1], val_loss)
        report.stop_epoch = epoch
        if stopper.should_stop:
            break
    report.best_epoch = stopper.best_epoch
    report.best_val_loss = float(stopper.best_loss)
    return best_snapshot, report


# ---------------------------------------------------------------------------
# Finite-difference gradient verification
# ---------------------------------------------------------------------------


def gradient_check(
    features: np.ndarray,
    mask: np.ndarray,
    labels: np.ndarray,
    params: ModelParams,
    step: float = 1e-5,
    abs_floor: float = 1e-8,
) -> dict[str, float]:
    """Compare every gradient coordinate against central finite differences.

    Returns per-tensor worst relative error. Coordinates whose absolute
    discrepancy is below `abs_floor` count as exact: there the difference is
    dominated by float64 roundoff of the loss evaluations, not by the gradient.
    """
    _, grads = backward(features, mask, labels, params)
    worst: dict[str, float] = {}
    for name, arr in params.named_arrays():
        g = grads[name]
        err = 0.0
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + step
            up = batch_loss(features, mask, labels, params)
            flat[idx] = orig - step
            down = batch_loss(features, mask, labels, params)
            flat[idx] = orig
            fd = (up - down) / (2.0 * step)
            diff = abs(fd - gflat[idx])
            if diff > abs_floor:
                err = max(err, diff / max(abs(fd), abs(gflat[idx])))
        worst[name] = err
    return worst
