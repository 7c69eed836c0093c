"""Training objectives: speaker cross-entropy, triplet distance, pair BCE and their weighted sum."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, NormalizationError
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.1
    gamma: float = 0.3
    margin_a: float = 0.8
    l2_normalize: bool = False
    triplet_layer: str = "A"

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ContractError("loss weights must be non-negative")
        if self.margin_a <= 0:
            raise ContractError("triplet margin must be positive")
        if self.triplet_layer not in ("A", "B"):
            raise ContractError(f"triplet_layer must be 'A' or 'B', got {self.triplet_layer!r}")


@dataclass
class TripletBatch:
    anchors: Tensor
    positives: Tensor
    negatives: Tensor
    anchor_labels: Sequence[int] = ()

    def __post_init__(self):
        if not (self.anchors.shape == self.positives.shape == self.negatives.shape):
            raise DimensionError(
                f"triplet batch shapes differ: {self.anchors.shape}, "
                f"{self.positives.shape}, {self.negatives.shape}"
            )


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]`` over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n):
        raise ContractError(f"cross_entropy: labels must lie in [0, {n})")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(labels.size), labels] = 1.0
    picked = T.sum(T.mul(T.log_softmax(logits, axis=1), onehot))
    return T.scale(picked, -1.0 / labels.size)


def squared_distance(x1: Tensor, x2: Tensor) -> Tensor:
    if x1.shape != x2.shape:
        raise DimensionError(f"distance: shapes {x1.shape} and {x2.shape} differ")
    return T.sum(T.square(T.sub(x1, x2)), axis=-1)


def euclidean_distance(x1: Tensor, x2: Tensor) -> Tensor:
    """sqrt(sum_i (x1_i - x2_i)^2) along the last axis."""
    return T.sqrt(squared_distance(x1, x2))


def triplet_loss(b: TripletBatch, margin_a: float = 0.8) -> Tensor:
    """Mean hinge ``max(0, |a-p|^2 - |a-n|^2 + margin)`` over the triplets."""
    if b.anchors.size == 0:
        raise ContractError("triplet_loss: empty batch")
    gap = T.sub(squared_distance(b.anchors, b.positives), squared_distance(b.anchors, b.negatives))
    hinge = T.relu(T.add(gap, float(margin_a)))
    return T.mean(hinge)


def similarity_bce(logits: Tensor, labels) -> Tensor:
    """Binary cross-entropy of ``sigmoid(logits)`` against boolean labels, in logit space."""
    y = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return T.mean(T.sub(T.softplus(logits), T.mul(logits, y)))


def joint_loss(ce: Tensor | None, triplet: Tensor | None, sim: Tensor | None, w: LossWeights) -> Tensor:
    """alpha*ce + beta*triplet + gamma*sim; ``None`` components are left out."""
    terms = [T.scale(t, c) for t, c in ((ce, w.alpha), (triplet, w.beta), (sim, w.gamma)) if t is not None]
    if not terms:
        raise ContractError("joint_loss: no loss components")
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def maybe_l2_normalize(e: Tensor, enabled: bool) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm when ``enabled``."""
    if not enabled:
        return e
    norms = T.sqrt(T.sum(T.square(e), axis=-1, keepdims=True))
    if np.any(norms.data == 0):
        raise NormalizationError("cannot l2-normalise a zero vector")
    return T.div(e, norms)
