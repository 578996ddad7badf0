"""Training loop, optimizers, and protocol evaluation.

A run is fully determined by its TrainConfig and seed: batch order, parameter
initialization and every update are reproducible. The checkpoint returned is
the state of the epoch with the best training accuracy (earliest on ties).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import DatasetSplit, batches
from .models import MultiPathModel, forward_all
from .routing import (
    TargetBatch,
    average_loss_baseline,
    log_softmax_bundle,
    mean_inference,
    strong_inference,
    weakroute_loss,
)
from .tensor import GradCheckReport, Tape, Tensor

PROTOCOLS = ("strong", "mean", "per_pathway")


class NumericsError(RuntimeError):
    """Training hit a non-finite loss; carries where and the loss history."""

    def __init__(self, epoch: int, batch: int, history: list):
        self.epoch = epoch
        self.batch = batch
        self.history = list(history)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch}; "
            f"recent losses: {[round(v, 6) for v in self.history[-8:]]}"
        )


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    optimizer: str = "adam"  # adam | sgd_momentum
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_mode: str = "weakroute"  # weakroute | average_baseline
    loss_renormalize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.optimizer not in ("adam", "sgd_momentum"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_mode not in ("weakroute", "average_baseline"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")


@dataclass
class EpochMetrics:
    epoch: int
    mean_loss: float
    train_accuracy: float
    test_strong: float
    test_mean: float
    per_pathway: np.ndarray = field(default_factory=lambda: np.zeros(0))


def sgd_momentum_step(params, grads, state, lr, momentum=0.9):
    """velocity = momentum * velocity + grad; param -= lr * velocity."""
    velocity = state.setdefault("velocity", [np.zeros_like(p) for p in params])
    for p, g, v in zip(params, grads, velocity):
        v *= momentum
        v += g
        p -= lr * v
    return state


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected first/second moment update."""
    m = state.setdefault("m", [np.zeros_like(p) for p in params])
    v = state.setdefault("v", [np.zeros_like(p) for p in params])
    state["t"] = t = state.get("t", 0) + 1
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for p, g, mi, vi in zip(params, grads, m, v):
        mi *= beta1
        mi += (1.0 - beta1) * g
        vi *= beta2
        vi += (1.0 - beta2) * g * g
        p -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
    return state


def _loss_fn(cfg: TrainConfig) -> Callable:
    if cfg.loss_mode == "weakroute":
        return lambda bundle, target: weakroute_loss(bundle, target, cfg.loss_renormalize)
    return average_loss_baseline


def predict(model: MultiPathModel, split: DatasetSplit, protocol: str, chunk: int = 256) -> np.ndarray:
    """Predicted labels under a protocol; per_pathway returns [n_pathways, n]."""
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    outs = []
    for start in range(0, len(split), chunk):
        bundle = forward_all(model, split.images[start : start + chunk])
        lp = log_softmax_bundle(bundle)
        if protocol == "strong":
            outs.append(strong_inference(lp).logits.data.argmax(axis=1))
        elif protocol == "mean":
            outs.append(mean_inference(lp).logits.data.argmax(axis=1))
        else:
            outs.append(np.stack([c.data.argmax(axis=1) for c in lp.columns]))
    return np.concatenate(outs, axis=-1)


def evaluate(model: MultiPathModel, split: DatasetSplit, protocol: str):
    """Accuracy under a protocol; per_pathway returns one accuracy per column."""
    preds = predict(model, split, protocol)
    return (preds == split.labels).mean(axis=-1)


def train(
    model: MultiPathModel,
    train_split: DatasetSplit,
    test_split: DatasetSplit,
    cfg: TrainConfig,
    prefetch: int = 0,
    on_epoch: Optional[Callable[[EpochMetrics], None]] = None,
) -> tuple[dict[str, np.ndarray], list[EpochMetrics]]:
    """Train and return (best-train-accuracy parameter state, epoch metrics).

    Train accuracy (used for checkpoint selection) and both test protocols
    are measured on the frozen parameters at the end of each epoch.
    ``on_epoch`` is invoked with each epoch's metrics as they are produced,
    so callers can stream them out while the run is still going.
    """
    loss_of = _loss_fn(cfg)
    opt_state: dict = {}
    arrays = [t.data for _, t in model.parameters]
    history: list[float] = []
    metrics: list[EpochMetrics] = []
    best_acc = -1.0
    best_state = model.state()

    for epoch in range(cfg.epochs):
        epoch_losses = []
        for batch_index, (images, target) in enumerate(
            batches(train_split, cfg.batch_size, cfg.seed, True, epoch, prefetch)
        ):
            with Tape() as tape:
                loss = loss_of(model.forward(Tensor(images)), target)
            value = float(loss.data)
            history.append(value)
            if not np.isfinite(value):
                raise NumericsError(epoch, batch_index, history)
            model.zero_grads()
            tape.backward(loss)
            grads = [
                t.grad if t.grad is not None else np.zeros_like(t.data)
                for _, t in model.parameters
            ]
            if cfg.optimizer == "adam":
                adam_step(arrays, grads, opt_state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            else:
                sgd_momentum_step(arrays, grads, opt_state, cfg.learning_rate, cfg.momentum)
            epoch_losses.append(value)
        model.zero_grads()

        train_acc = float(evaluate(model, train_split, "mean"))
        entry = EpochMetrics(
            epoch=epoch,
            mean_loss=float(np.mean(epoch_losses)),
            train_accuracy=train_acc,
            test_strong=float(evaluate(model, test_split, "strong")),
            test_mean=float(evaluate(model, test_split, "mean")),
            per_pathway=np.asarray(evaluate(model, test_split, "per_pathway")),
        )
        metrics.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
        if train_acc > best_acc:
            best_acc = train_acc
            best_state = model.state()
    return best_state, metrics


def gradient_check(
    model: MultiPathModel,
    images: np.ndarray,
    target: TargetBatch,
    renormalize: bool = True,
    h: float = 1e-6,
) -> tuple[str, GradCheckReport]:
    """Compare the routed loss's analytic gradient against central differences
    for every parameter; returns the worst offender."""
    model.zero_grads()
    with Tape() as tape:
        loss = weakroute_loss(model.forward(Tensor(images)), target, renormalize)
    tape.backward(loss)
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for name, t in model.parameters
    }
    model.zero_grads()

    def loss_value() -> float:
        return float(weakroute_loss(model.forward(Tensor(images)), target, renormalize).data)

    worst_name = ""
    worst = GradCheckReport(-1.0, 0, 0.0, 0.0)
    for name, t in model.parameters:
        flat = t.data.reshape(-1)
        a = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_value()
            flat[i] = orig - h
            down = loss_value()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            rel = abs(a[i] - numeric) / max(abs(a[i]), abs(numeric), 1e-12)
            if rel > worst.max_rel_error:
                worst = GradCheckReport(rel, i, float(a[i]), numeric)
                worst_name = name
    return worst_name, worst
