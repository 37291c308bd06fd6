"""Differentiable channel-discriminability and distribution-alignment losses.

The pipeline turns a batch of activation maps A (m x c x h x w) and its
one-hot labels Y (m x n) into two scalars:

* a Gini impurity term: pool A to per-channel means M, clamp at zero,
  average per class into a score matrix S = M^T Ybar (Ybar is Y with each
  class column normalized by its sample count), normalize the rows of S
  into per-channel class distributions Sbar, and score the mean impurity
  (1/c) * sum_i (1 - sum_j sbar_ij^2). Zero when every channel fires for
  exactly one class, maximal (1 - 1/n) when channels are uniform.

* a divergence term: collapse Sbar column-wise into an n-bin histogram of
  channel mass per class and take its KL divergence (natural log) against
  the empirical class histogram of the batch. Zero when channel mass is
  distributed across classes exactly like the labels are.

Both scalars are built from primitive tensor ops, so their gradients flow
back to A (and through it to the network parameters). All normalization
denominators and both KL logarithm arguments carry a small epsilon so the
pipeline stays defined for absent classes and dead channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    ContractViolationError,
    DegenerateInputError,
    DimensionError,
    LabelError,
)
from .tensor import Tensor

__all__ = [
    "LossConfig",
    "LabelMatrix",
    "normalize_labels",
    "class_mean_activations",
    "row_normalize",
    "gini_loss",
    "feature_histogram",
    "class_histogram",
    "kl_loss",
    "disco_loss",
    "total_loss",
]


@dataclass
class LossConfig:
    """Weights and gating for the auxiliary losses.

    lambda1 weighs the Gini term, lambda2 the KL term. The terms enter the
    total objective only from gate_epoch onward. kl_reverse swaps the KL
    argument order (class histogram first); the default direction puts the
    feature histogram first.
    """

    lambda1: float = 0.5
    lambda2: float = 0.5
    gate_epoch: int = 10
    epsilon: float = 1e-8
    kl_reverse: bool = False

    def validate(self) -> None:
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.gate_epoch < 0:
            raise ConfigError("gate_epoch must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be positive")

    def to_dict(self) -> dict:
        return {
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "gate_epoch": self.gate_epoch,
            "epsilon": self.epsilon,
            "kl_reverse": self.kl_reverse,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class LabelMatrix:
    """One-hot target matrix of shape m x n."""

    def __init__(self, matrix):
        arr = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
        if arr.ndim != 2:
            raise LabelError(f"label matrix must be 2-D, got {arr.ndim}-D")
        if arr.size and (
            not np.all((arr == 0.0) | (arr == 1.0))
            or not np.all(arr.sum(axis=1) == 1.0)
        ):
            raise LabelError("each label row must be one-hot (a single 1, rest 0)")
        self.matrix = arr

    @classmethod
    def from_labels(cls, labels, n_classes: int) -> "LabelMatrix":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise LabelError(
                f"labels must lie in [0, {n_classes}), got range "
                f"[{labels.min()}, {labels.max()}]"
            )
        y = np.zeros((labels.size, n_classes), dtype=np.float64)
        y[np.arange(labels.size), labels] = 1.0
        return cls(y)

    @property
    def m(self) -> int:
        return self.matrix.shape[0]

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def class_counts(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    def present_classes(self) -> np.ndarray:
        """Boolean mask of classes that have at least one sample."""
        return self.class_counts() > 0

    def labels(self) -> np.ndarray:
        return self.matrix.argmax(axis=1)


def normalize_labels(y: LabelMatrix) -> np.ndarray:
    """Column-normalize Y so each present class column sums to 1.

    Entry (i, j) becomes y_ij divided by the number of class-j samples in
    the batch. Columns of absent classes stay all-zero; downstream they
    contribute nothing to the score matrix.
    """
    counts = y.class_counts()
    return y.matrix / np.where(counts > 0, counts, 1.0)


def class_mean_activations(m_pooled: Tensor, ybar: np.ndarray) -> Tensor:
    """Score matrix S = M^T Ybar of per-class mean channel activations.

    Entry (i, j) is the mean pooled activation of channel i over the
    samples of class j (zero for absent classes).
    """
    if m_pooled.ndim != 2:
        raise DimensionError(f"pooled activations must be 2-D, got {m_pooled.shape}")
    if m_pooled.shape[0] != ybar.shape[0]:
        raise DimensionError(
            f"sample counts differ: activations {m_pooled.shape[0]}, "
            f"labels {ybar.shape[0]}"
        )
    return T.matmul(T.transpose(m_pooled), Tensor(ybar.astype(m_pooled.dtype)))


def row_normalize(s: Tensor, epsilon: float = 1e-8) -> Tensor:
    """Normalize each row of S into a class distribution.

    Rows must be non-negative. An all-zero row (dead channel) stays
    all-zero; the Gini term then counts it as maximally impure.
    """
    if np.any(s.data < 0):
        raise ContractViolationError("row_normalize requires non-negative entries")
    row_sums = s.sum(axis=1, keepdims=True)
    return s / (row_sums + epsilon)


def gini_loss(sbar: Tensor) -> Tensor:
    """Mean Gini impurity of the per-channel class distributions."""
    per_row = (sbar * sbar).sum(axis=1)
    return (1.0 - per_row).mean()


def feature_histogram(sbar: Tensor, epsilon: float = 1e-8) -> Tensor:
    """n-bin distribution of total channel mass per class.

    Bin i sums column i of Sbar and divides by the total mass of Sbar.
    """
    if not np.any(sbar.data):
        raise DegenerateInputError("all-zero score matrix has no class mass")
    col = sbar.sum(axis=0)
    total = col.sum()
    return col / (total + epsilon)


def class_histogram(y: LabelMatrix) -> np.ndarray:
    """Empirical class frequencies of the batch (sums to 1 exactly)."""
    if y.m == 0:
        raise DegenerateInputError("class histogram of an empty batch")
    return y.class_counts() / y.m


def kl_loss(h_first, h_second, epsilon: float = 1e-8) -> Tensor:
    """KL divergence sum_i p_i * ln((p_i + eps) / (q_i + eps)).

    The first argument is the distribution the gradient flows through when
    it is a tracked tensor; either argument may be a plain array.
    """
    p = h_first if isinstance(h_first, Tensor) else Tensor(h_first)
    q = h_second if isinstance(h_second, Tensor) else Tensor(np.asarray(h_second, dtype=p.dtype))
    if p.shape != q.shape:
        raise DimensionError(f"histogram lengths differ: {p.shape} vs {q.shape}")
    return (p * (T.log(p + epsilon) - T.log(q + epsilon))).sum()


def disco_loss(a: Tensor, y: LabelMatrix, cfg: LossConfig) -> tuple[Tensor, Tensor]:
    """Both auxiliary losses for an activation batch, as tracked scalars.

    Composition: global average pooling, clamp at zero, per-class means,
    row normalization, then the Gini impurity on one branch and the
    histogram KL on the other. Gradients reach ``a`` through every stage.
    """
    cfg.validate()
    if a.ndim != 4:
        raise DimensionError(f"activation batch must be 4-D, got {a.shape}")
    if a.shape[0] != y.m:
        raise DimensionError(
            f"batch sizes differ: activations {a.shape[0]}, labels {y.m}"
        )
    pooled = T.global_avg_pool(a)
    pooled_pos = T.relu(pooled)
    ybar = normalize_labels(y)
    scores = class_mean_activations(pooled_pos, ybar)
    sbar = row_normalize(scores, cfg.epsilon)
    l_gini = gini_loss(sbar)
    h_feat = feature_histogram(sbar, cfg.epsilon)
    h_class = class_histogram(y)
    if cfg.kl_reverse:
        l_kl = kl_loss(h_class, h_feat, cfg.epsilon)
    else:
        l_kl = kl_loss(h_feat, h_class, cfg.epsilon)
    return l_gini, l_kl


def total_loss(
    l_star: Tensor,
    l_gini: Tensor,
    l_kl: Tensor,
    cfg: LossConfig,
    current_epoch: int,
) -> Tensor:
    """Combined objective with epoch gating.

    Before gate_epoch the primary loss passes through untouched (the
    auxiliary terms stay off the graph, so they contribute no gradient).
    From gate_epoch onward the weighted auxiliary terms are added; a zero
    weight keeps its term off the graph entirely, which makes a
    zero-weight run bit-identical to a plain run.
    """
    if current_epoch < cfg.gate_epoch:
        return l_star
    total = l_star
    if cfg.lambda1 != 0.0:
        total = total + cfg.lambda1 * l_gini
    if cfg.lambda2 != 0.0:
        total = total + cfg.lambda2 * l_kl
    return total
