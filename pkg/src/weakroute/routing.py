"""Weakness-scored logit composition for multi-pathway classifiers.

A model emits one logit vector per pathway. Training composes a combined
vector from, per class, the pathway whose component is currently weakest,
so backpropagation repairs weak concepts instead of splitting evenly.
Inference either picks the strongest components under a pseudo target
("strong" protocol) or averages the log-probabilities ("mean" protocol).

Weakness scores and the resulting selections are computed outside the
gradient tape: they steer the routing but are never differentiated, exactly
like the argmax in max-pooling.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import (
    ClassCountError,
    DimensionError,
    Tensor,
    gather_rows,
    log_softmax_rows,
    note_kink_margin,
    select_elements,
)


def _note_selection_margin(scores: np.ndarray, axis: int) -> None:
    # Distance between best and runner-up: how far the routing sits from
    # flipping its choice.
    if scores.shape[axis] < 2:
        return
    ordered = np.sort(scores, axis=axis)
    top = np.take(ordered, -1, axis=axis)
    runner_up = np.take(ordered, -2, axis=axis)
    note_kink_margin((top - runner_up).min())


@dataclass
class LogitBundle:
    """Raw per-pathway logits for one batch: N tensors, each [batch x classes]."""

    pathways: list[Tensor]

    def __post_init__(self):
        if len(self.pathways) < 1:
            raise ValueError("a bundle needs at least one pathway")
        shape = self.pathways[0].data.shape
        if len(shape) != 2:
            raise DimensionError(f"pathway logits must be [batch, classes], got {shape}")
        if shape[1] < 2:
            raise ClassCountError(f"{shape[1]} class(es) is not a classification problem")
        for t in self.pathways[1:]:
            if t.data.shape != shape:
                raise DimensionError(
                    f"pathway shapes disagree: {shape} vs {t.data.shape}"
                )

    @property
    def n_pathways(self) -> int:
        return len(self.pathways)

    @property
    def n_classes(self) -> int:
        return self.pathways[0].data.shape[1]

    @property
    def batch_size(self) -> int:
        return self.pathways[0].data.shape[0]


@dataclass
class TargetBatch:
    """Ground-truth (or pseudo) labels with their one-hot encoding."""

    labels: np.ndarray
    one_hot: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.one_hot = np.asarray(self.one_hot, dtype=np.float64)
        if self.one_hot.ndim != 2 or self.labels.shape != (self.one_hot.shape[0],):
            raise DimensionError(
                f"target shapes disagree: labels {self.labels.shape}, one_hot {self.one_hot.shape}"
            )
        if not np.array_equal(self.one_hot.sum(axis=1), np.ones(len(self.labels))):
            raise ValueError("one_hot rows must each sum to exactly 1")
        if not np.array_equal(self.one_hot.argmax(axis=1), self.labels):
            raise ValueError("labels are inconsistent with one_hot")

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "TargetBatch":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise ValueError(f"labels outside [0, {n_classes})")
        one_hot = np.zeros((len(labels), n_classes))
        one_hot[np.arange(len(labels)), labels] = 1.0
        return cls(labels=labels, one_hot=one_hot)

    @property
    def n_classes(self) -> int:
        return self.one_hot.shape[1]


@dataclass
class LogProbMatrix:
    """Log-softmaxed pathway outputs.

    ``columns`` keeps one tape-connected [batch x classes] tensor per pathway
    so gradients can flow into whichever entries get selected. ``values`` is
    the same data stacked into a detached [batch x classes x pathways] array,
    the substrate for all (gradient-free) scoring.
    """

    columns: list[Tensor]
    values: np.ndarray = field(init=False)

    def __post_init__(self):
        self.values = np.stack([t.data for t in self.columns], axis=2)

    @property
    def n_pathways(self) -> int:
        return len(self.columns)

    @property
    def n_classes(self) -> int:
        return self.values.shape[1]

    @property
    def batch_size(self) -> int:
        return self.values.shape[0]


@dataclass
class WeaknessMatrix:
    """Per-(sample, class, pathway) weakness scores; never on the tape."""

    values: np.ndarray


@dataclass
class SelectionMap:
    """Chosen pathway index per (sample, class); constants w.r.t. the tape."""

    indices: np.ndarray

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)


@dataclass
class ComposedOutput:
    """A combined [batch x classes] logit tensor plus how it was assembled."""

    logits: Tensor
    selection: Optional[SelectionMap]
    mode: str  # train_weakest | infer_strong | infer_mean


def log_softmax_bundle(bundle: LogitBundle) -> LogProbMatrix:
    """Log-softmax each pathway over its classes; stays on the tape."""
    return LogProbMatrix(columns=[log_softmax_rows(p) for p in bundle.pathways])


def _check_target(lp: LogProbMatrix, target: TargetBatch) -> None:
    if target.one_hot.shape != (lp.batch_size, lp.n_classes):
        raise DimensionError(
            f"target shape {target.one_hot.shape} does not match "
            f"log-probs [{lp.batch_size}, {lp.n_classes}]"
        )


def weakness(lp: LogProbMatrix, target: TargetBatch) -> WeaknessMatrix:
    """Score how poorly each pathway serves each class of each sample.

    For the positive class the score grows as the pathway's share of the
    (all-negative) log-probability mass grows; for negative classes it is the
    negated share. Positive-class scores land in (1, 2), negative in (-1, 0)
    whenever there are at least two pathways.
    """
    _check_target(lp, target)
    v = lp.values
    ratio = v / v.sum(axis=2, keepdims=True)  # denominators strictly negative
    t = target.one_hot[:, :, None]
    return WeaknessMatrix(values=t + (2.0 * t - 1.0) * ratio)


def compose_weakest(lp: LogProbMatrix, target: TargetBatch) -> ComposedOutput:
    """Per class, take the component of the weakest pathway (ties: lowest index).

    Gradient flows only into the selected log-probability entries; the
    selection itself is a constant.
    """
    w = weakness(lp, target)
    _note_selection_margin(w.values, axis=2)
    indices = w.values.argmax(axis=2)
    logits = select_elements(lp.columns, indices)
    return ComposedOutput(logits=logits, selection=SelectionMap(indices), mode="train_weakest")


def pseudo_target(lp: LogProbMatrix) -> TargetBatch:
    """One-hot surrogate label: the class holding the globally strongest
    log-probability across all pathways (ties: lowest class index)."""
    best_per_class = lp.values.max(axis=2)
    _note_selection_margin(best_per_class, axis=1)
    labels = best_per_class.argmax(axis=1)
    return TargetBatch.from_labels(labels, lp.n_classes)


def strong_inference(lp: LogProbMatrix) -> ComposedOutput:
    """Per class, take the component of the least weak pathway under the
    pseudo target (ties: lowest index)."""
    guess = pseudo_target(lp)
    w = weakness(lp, guess)
    _note_selection_margin(-w.values, axis=2)
    indices = w.values.argmin(axis=2)
    logits = select_elements(lp.columns, indices)
    return ComposedOutput(logits=logits, selection=SelectionMap(indices), mode="infer_strong")


def mean_inference(lp: LogProbMatrix) -> ComposedOutput:
    """Arithmetic mean of the per-pathway log-probabilities."""
    acc = lp.columns[0]
    for col in lp.columns[1:]:
        acc = acc + col
    return ComposedOutput(logits=acc * (1.0 / lp.n_pathways), selection=None, mode="infer_mean")


def _cross_entropy(logits: Tensor, target: TargetBatch) -> Tensor:
    return -(gather_rows(log_softmax_rows(logits), target.labels).mean())


def weakroute_loss(bundle: LogitBundle, target: TargetBatch, renormalize: bool = True) -> Tensor:
    """Mean cross entropy over the weakest-component composition.

    The composed vector mixes entries from different per-pathway
    distributions, so by default it is treated as a fresh logit vector and
    sent through a second softmax. With ``renormalize=False`` it is taken as
    ready log-probabilities and scored by plain negative log-likelihood.
    """
    lp = log_softmax_bundle(bundle)
    composed = compose_weakest(lp, target)
    if renormalize:
        return _cross_entropy(composed.logits, target)
    return -(gather_rows(composed.logits, target.labels).mean())


def average_loss_baseline(bundle: LogitBundle, target: TargetBatch) -> Tensor:
    """Traditional comparator: average raw logits across pathways, then
    cross entropy. Gradient splits equally across pathways."""
    if target.one_hot.shape != (bundle.batch_size, bundle.n_classes):
        raise DimensionError(
            f"target shape {target.one_hot.shape} does not match bundle "
            f"[{bundle.batch_size}, {bundle.n_classes}]"
        )
    acc = bundle.pathways[0]
    for p in bundle.pathways[1:]:
        acc = acc + p
    return _cross_entropy(acc * (1.0 / bundle.n_pathways), target)
