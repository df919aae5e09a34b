"""Training objective (cross-entropy + cosine alignment) and evaluation metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from .autograd import Tensor, log_softmax, relu, sqrt


class DegenerateEmbeddingError(ValueError):
    """An embedding with zero norm makes the cosine similarity undefined."""


@dataclass(frozen=True)
class LossWeights:
    ce_audio: float = 1.0
    ce_visual: float = 1.0
    ce_multi: float = 1.0
    alignment: float = 1.0
    # which label marks a pair as real for the alignment term:
    # "y_m" or "y_a_and_y_v"
    alignment_target: str = "y_m"

    def __post_init__(self):
        for name in ("ce_audio", "ce_visual", "ce_multi", "alignment"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be non-negative")
        if self.alignment_target not in ("y_m", "y_a_and_y_v"):
            raise ValueError(f"unknown alignment_target {self.alignment_target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(y, k: int = 2) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"labels must be 1-D, got shape {y.shape}")
    if not np.all(np.isin(y, np.arange(k))):
        raise ValueError(f"labels must lie in {{0..{k - 1}}}, got {np.unique(y).tolist()}")
    return y.astype(int)


def cross_entropy(logits: Tensor, y) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[y]``."""
    B, k = logits.shape
    y = _labels(y, k)
    if len(y) != B:
        raise ValueError(f"{len(y)} labels for a batch of {B}")
    onehot = np.zeros((B, k))
    onehot[np.arange(B), y] = 1.0
    return -(log_softmax(logits) * onehot).sum() * (1.0 / B)


def cosine_similarity(Z_a: Tensor, Z_v: Tensor) -> Tensor:
    """Per-sample cosine between the flattened frame embeddings (CLS excluded)."""
    if Z_a.shape != Z_v.shape:
        raise ValueError(f"embedding shapes differ: {Z_a.shape} vs {Z_v.shape}")
    B = Z_a.shape[0]
    x_a = Z_a[:, 1:, :].reshape(B, -1)
    x_v = Z_v[:, 1:, :].reshape(B, -1)
    sq_a = (x_a * x_a).sum(axis=1)
    sq_v = (x_v * x_v).sum(axis=1)
    zero = np.flatnonzero((sq_a.data == 0) | (sq_v.data == 0))
    if zero.size:
        raise DegenerateEmbeddingError(f"zero-norm frame embedding for batch rows {zero.tolist()}")
    return (x_a * x_v).sum(axis=1) / sqrt(sq_a * sq_v)


def alignment_loss(Z_a: Tensor, Z_v: Tensor, y) -> Tensor:
    """Mean of ``y (1 - d) + (1 - y) max(0, d)`` with ``d`` the pair cosine."""
    y = _labels(y).astype(float)
    d = cosine_similarity(Z_a, Z_v)
    if len(y) != d.shape[0]:
        raise ValueError(f"{len(y)} labels for a batch of {d.shape[0]}")
    per_sample = y * (1.0 - d) + (1.0 - y) * relu(d)
    return per_sample.mean()


def total_loss(logits_a, logits_v, logits_m, Z_a, Z_v, y_a, y_v, y_m,
               weights: LossWeights = LossWeights()) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the three cross-entropy terms and the alignment term.

    Returns the differentiable total and the unweighted component values.
    """
    y_align = y_m
    if weights.alignment_target == "y_a_and_y_v":
        y_align = np.logical_and(np.asarray(y_a), np.asarray(y_v)).astype(int)
    terms = {
        "ce_audio": cross_entropy(logits_a, y_a),
        "ce_visual": cross_entropy(logits_v, y_v),
        "ce_multi": cross_entropy(logits_m, y_m),
        "alignment": alignment_loss(Z_a, Z_v, y_align),
    }
    total = None
    for name, term in terms.items():
        part = term * getattr(weights, name)
        total = part if total is None else total + part
    return total, {name: term.item() for name, term in terms.items()}


def predict_labels(logits) -> np.ndarray:
    """Argmax over two classes, ties go to label 0."""
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return (logits[:, 1] > logits[:, 0]).astype(int)


def real_probability(logits) -> np.ndarray:
    logits = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=float)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


def accuracy(pred_labels, true_labels) -> float:
    pred, true = np.asarray(pred_labels), np.asarray(true_labels)
    if pred.shape != true.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {true.shape}")
    if pred.size == 0:
        raise ValueError("accuracy of an empty sequence is undefined")
    return float(np.mean(pred == true))


def auc(scores, labels) -> float:
    """ROC AUC as the Mann-Whitney statistic: P(real > fake) + P(tie) / 2.

    ``labels`` uses 1 for the positive ("real") class.
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length 1-D")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one sample of each class")
    ranks = rankdata(scores)  # average ranks for ties
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))
