"""Contrastive node alignment and edge alignment between the two graphs."""

from __future__ import annotations

import dataclasses
from typing import Sequence

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    add,
    exp,
    log,
    matmul,
    mean,
    mse,
    mul,
    pow_const,
    reshape,
    scale,
    sub,
    sum_,
    swap_last,
)

DOWNSTREAM_KINDS = ("mse_regression", "cross_entropy")


@dataclasses.dataclass
class LossWeights:
    """Temperature, per-term weights, and the downstream loss selector."""

    tau: float = 0.1
    lambda_s: float = 1e-4
    lambda_l: float = 1e-2
    lambda_e: float = 1e-3
    downstream: str = "cross_entropy"
    similarity: str = "dot"  # or "cosine"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")
        if min(self.lambda_s, self.lambda_l, self.lambda_e) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.downstream not in DOWNSTREAM_KINDS:
            raise ValueError(f"downstream must be one of {DOWNSTREAM_KINDS}")
        if self.similarity not in ("dot", "cosine"):
            raise ValueError("similarity must be 'dot' or 'cosine'")


@dataclasses.dataclass
class AlignmentProjection:
    """Trainable maps applied before the similarity computations."""

    w_m: Tensor  # (d_h, d_h), signal side
    w_r: Tensor  # (2*d_h, d_h), knowledge-readout side

    @classmethod
    def create(cls, hidden_dim: int, rng: np.random.Generator, dtype=np.float64):
        draw = lambda shape: Tensor(
            rng.normal(scale=1.0 / np.sqrt(shape[0]), size=shape).astype(dtype), requires_grad=True
        )
        return cls(draw((hidden_dim, hidden_dim)), draw((2 * hidden_dim, hidden_dim)))


def _normalize_rows(t: Tensor) -> Tensor:
    norm_sq = sum_(mul(t, t), axis=-1, keepdims=True)
    return mul(t, pow_const(add(norm_sq, Tensor(np.full_like(norm_sq.data, 1e-12))), -0.5))


def _contrastive_excluding_self(sims: Tensor) -> Tensor:
    """Mean over anchors of log(denominator) - positive, positives on the diagonal.

    The denominator sums exp similarities over all other columns only.
    Row-max shifts (constants) keep the exponentials bounded without
    changing values or gradients.
    """
    n = sims.shape[-1]
    eye = np.eye(n, dtype=sims.dtype)
    off = 1.0 - eye
    off_logits = np.where(off > 0, sims.data, -np.inf)
    row_max = off_logits.max(axis=-1, keepdims=True)
    shifted = sub(sims, Tensor(row_max))
    masked_exp = mul(exp(shifted), Tensor(off))
    log_denominator = add(log(sum_(masked_exp, axis=-1)), Tensor(row_max[..., 0]))
    positives = sum_(mul(sims, Tensor(eye)), axis=-1)
    return mean(sub(log_denominator, positives))


def _pairwise_sims(anchors: Tensor, candidates: Tensor, tau: float, similarity: str) -> Tensor:
    if similarity == "cosine":
        anchors, candidates = _normalize_rows(anchors), _normalize_rows(candidates)
    return scale(matmul(anchors, swap_last(candidates)), 1.0 / tau)


def sensor_level_loss(
    z_signal: Tensor,
    sensor_part: Tensor,
    proj: AlignmentProjection,
    tau: float,
    similarity: str = "dot",
) -> Tensor:
    """Contrastive alignment of each signal node with its own prompt feature.

    Negatives are the other nodes of the same sample; the positive pair is
    excluded from the denominator.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    if z_signal.ndim != 2 or z_signal.shape != sensor_part.shape:
        raise ShapeError(
            f"sensor_level_loss: expected matching (nodes, d_h) inputs, got {z_signal.shape} vs {sensor_part.shape}"
        )
    if z_signal.shape[0] < 2:
        raise ShapeError("sensor_level_loss: needs at least 2 nodes")
    sims = _pairwise_sims(matmul(z_signal, proj.w_m), sensor_part, tau, similarity)
    return _contrastive_excluding_self(sims)


def label_level_loss(
    z_signal_batch: Tensor,
    z_knowledge_batch: Tensor,
    proj: AlignmentProjection,
    tau: float,
    similarity: str = "dot",
) -> Tensor:
    """Contrastive alignment of per-sample readouts across a batch.

    The signal readout stacks all node features; the knowledge readout
    stacks per-node features projected from 2*d_h down to d_h so both
    sides have equal length.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    if z_signal_batch.ndim != 3 or z_knowledge_batch.ndim != 3:
        raise ShapeError(
            f"label_level_loss: expected batched (B, nodes, d) inputs, got {z_signal_batch.shape} vs {z_knowledge_batch.shape}"
        )
    batch = z_signal_batch.shape[0]
    if batch < 2:
        raise ShapeError("label_level_loss: batch size must be >= 2 (denominator is empty otherwise)")
    if z_knowledge_batch.shape[0] != batch:
        raise ShapeError("label_level_loss: batch sizes differ")
    g_signal = reshape(z_signal_batch, (batch, -1))
    projected = matmul(z_knowledge_batch, proj.w_r)
    g_knowledge = reshape(projected, (batch, -1))
    if g_signal.shape[1] != g_knowledge.shape[1]:
        raise ShapeError(
            f"label_level_loss: readout lengths differ, {g_signal.shape[1]} vs {g_knowledge.shape[1]}"
        )
    sims = _pairwise_sims(g_signal, g_knowledge, tau, similarity)
    return _contrastive_excluding_self(sims)


def edge_loss(edges_signal: Tensor, edges_knowledge: Tensor) -> Tensor:
    """Mean squared difference over all edge pairs of one sample."""
    if edges_signal.shape != edges_knowledge.shape or edges_signal.ndim != 2:
        raise ShapeError(
            f"edge_loss: expected matching square matrices, got {edges_signal.shape} vs {edges_knowledge.shape}"
        )
    return mse(edges_signal, edges_knowledge)


def combined_loss(
    downstream: Tensor,
    sensor_losses: Sequence[Tensor],
    label_loss: Tensor | None,
    edge_losses: Sequence[Tensor],
    weights: LossWeights,
) -> Tensor:
    """Downstream loss plus weighted alignment terms.

    Per-sample sensor and edge losses enter as batch sums; a weight of
    exactly 0 drops its term from the recorded graph entirely.
    """
    total = downstream
    if weights.lambda_s != 0 and sensor_losses:
        acc = sensor_losses[0]
        for term in sensor_losses[1:]:
            acc = add(acc, term)
        total = add(total, scale(acc, weights.lambda_s))
    if weights.lambda_l != 0 and label_loss is not None:
        total = add(total, scale(label_loss, weights.lambda_l))
    if weights.lambda_e != 0 and edge_losses:
        acc = edge_losses[0]
        for term in edge_losses[1:]:
            acc = add(acc, term)
        total = add(total, scale(acc, weights.lambda_e))
    return total


# ---------------------------------------------------------------------------
# downstream losses


def mse_regression_loss(predictions: Tensor, targets: np.ndarray) -> Tensor:
    flat = reshape(predictions, (-1,))
    return mse(flat, Tensor(np.asarray(targets, dtype=flat.dtype)))


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy from raw logits and integer labels."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_loss: expected (B, classes) logits, got {logits.shape}")
    batch, n_classes = logits.shape
    labels = np.asarray(labels, dtype=int)
    if labels.shape != (batch,):
        raise ShapeError(f"cross_entropy_loss: labels shape {labels.shape} != ({batch},)")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("cross_entropy_loss: label out of range")
    row_max = logits.data.max(axis=1, keepdims=True)
    shifted = sub(logits, Tensor(row_max))
    log_norm = add(log(sum_(exp(shifted), axis=1)), Tensor(row_max[:, 0]))
    one_hot = np.zeros((batch, n_classes), dtype=logits.dtype)
    one_hot[np.arange(batch), labels] = 1.0
    picked = sum_(mul(logits, Tensor(one_hot)), axis=1)
    return mean(sub(log_norm, picked))
