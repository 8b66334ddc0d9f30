"""Ranking-loss family over unit-norm embeddings with dot-product similarity.

Per-anchor losses (``npair_loss``, ``ranking_loss_full``, ``ranking_loss``,
``softmax_ce``) are composed from tape primitives. Batch reductions
(``batch_ranking_loss``, ``batch_npair_loss``, ``batch_ranking_loss_full``,
``triplet_loss_hard``) run the fused kernels and record one tape node.

All functions return a scalar :class:`~maskrank.diffcore.Tensor`; call
``diffcore.backward`` on its tape for gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from . import kernels
from .diffcore import Tape, Tensor

UNIT_TOL = 1e-8
SIM_UNIT_TOL = 1e-6


class LossPreconditionError(ValueError):
    """A loss was called on a batch that cannot define it."""


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.2
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 2.0:
            raise ValueError(f"alpha must lie in [0, 2], got {self.alpha}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


@dataclass
class EmbeddingBatch:
    """``features`` is a (|B|, d) array or taped Tensor of unit rows."""

    features: Tensor | np.ndarray
    identity: np.ndarray
    camera: np.ndarray | None = None
    tape: Tape = field(init=False, repr=False)

    def __post_init__(self):
        if not isinstance(self.features, Tensor):
            self.tape = Tape()
            self.features = self.tape.param("features", self.features)
        else:
            self.tape = self.features.tape
        self.identity = np.asarray(self.identity)
        x = self.features.value
        if x.ndim != 2 or x.shape[0] < 2:
            raise LossPreconditionError(f"need a (|B| >= 2, d) matrix, got shape {x.shape}")
        if len(self.identity) != x.shape[0]:
            raise LossPreconditionError("identity labels do not match the number of rows")
        norms = np.sqrt(np.sum(x * x, axis=1))
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise LossPreconditionError("every embedding row must have unit L2 norm")

    def __len__(self):
        return self.features.shape[0]

    def ranking_batch(self, anchor: int) -> "RankingBatch":
        return RankingBatch.from_labels(self.identity, anchor)


@dataclass(frozen=True)
class RankingBatch:
    """Anchor row with its positive set B+ and negative set B- (sorted)."""

    anchor: int
    positives: tuple[int, ...]
    negatives: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positives", tuple(sorted(int(i) for i in self.positives)))
        object.__setattr__(self, "negatives", tuple(sorted(int(i) for i in self.negatives)))
        if self.anchor in self.positives:
            raise LossPreconditionError("anchor cannot be its own positive")
        if set(self.positives) & set(self.negatives):
            raise LossPreconditionError("positive and negative sets overlap")

    @classmethod
    def from_labels(cls, identity, anchor: int) -> "RankingBatch":
        identity = np.asarray(identity)
        same = identity == identity[anchor]
        pos = [i for i in np.flatnonzero(same) if i != anchor]
        neg = np.flatnonzero(~same)
        return cls(anchor, tuple(pos), tuple(neg))

    def check(self, identity) -> None:
        identity = np.asarray(identity)
        a = identity[self.anchor]
        if any(identity[p] != a for p in self.positives):
            raise LossPreconditionError("a positive has a different identity than the anchor")
        if any(identity[n] == a for n in self.negatives):
            raise LossPreconditionError("a negative shares the anchor identity")


def _require(rb: RankingBatch, exactly_one_pos: bool = False) -> None:
    if not rb.negatives:
        raise LossPreconditionError("loss needs at least one negative")
    if not rb.positives:
        raise LossPreconditionError("loss needs at least one positive")
    if exactly_one_pos and len(rb.positives) != 1:
        raise LossPreconditionError(f"N-pair loss needs exactly one positive, got {len(rb.positives)}")


def similarity(x_i, x_j):
    """Dot product of two unit vectors. Taped when either input is a Tensor."""
    for v in (x_i, x_j):
        val = v.value if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64)
        if abs(float(np.sqrt(np.sum(val * val))) - 1.0) > SIM_UNIT_TOL:
            raise LossPreconditionError("similarity expects unit-norm vectors")
    if isinstance(x_i, Tensor) or isinstance(x_j, Tensor):
        return dc.dot(x_i, x_j)
    return float(np.dot(np.asarray(x_i, dtype=np.float64), np.asarray(x_j, dtype=np.float64)))


def _anchor_sims(batch: EmbeddingBatch, rb: RankingBatch):
    x = batch.features
    anchor = dc.take(x, rb.anchor)
    s_pos = dc.dot(anchor, dc.take(x, list(rb.positives)))
    s_neg = dc.dot(anchor, dc.take(x, list(rb.negatives)))
    return s_pos, s_neg


def npair_loss(batch: EmbeddingBatch, rb: RankingBatch) -> Tensor:
    """``log(1 + sum_j exp(S(a, n_j) - S(a, p)))`` for a single positive."""
    _require(rb, exactly_one_pos=True)
    rb.check(batch.identity)
    s_pos, s_neg = _anchor_sims(batch, rb)
    terms = dc.exp(dc.sub(s_neg, s_pos))
    return dc.log(dc.add(dc.reduce_sum(terms), 1.0))


def ranking_loss_full(batch: EmbeddingBatch, rb: RankingBatch) -> Tensor:
    """All |B+| x |B-| pairs: ``log(1 + sum_i sum_j exp(S(a,n_j) - S(a,p_i)))``."""
    _require(rb)
    rb.check(batch.identity)
    s_pos, s_neg = _anchor_sims(batch, rb)
    n_pos, n_neg = len(rb.positives), len(rb.negatives)
    # (|B+|, |B-|) grid of differences, row i = positive i
    grid = dc.sub(
        dc.take(s_neg, (np.zeros((n_pos, 1), dtype=np.intp) + np.arange(n_neg))),
        dc.take(s_pos, (np.arange(n_pos)[:, None] + np.zeros((1, n_neg), dtype=np.intp))),
    )
    return dc.log(dc.add(dc.reduce_sum(dc.exp(grid)), 1.0))


def ranking_loss(batch: EmbeddingBatch, rb: RankingBatch, params: LossParams = LossParams()) -> Tensor:
    """Gated ranking loss against the least similar positive, plus the pull-to-one term.

    ``log(1 + sum_j [exp(S(a,n_j) - min_i S(a,p_i) + alpha)]_{1+})
      + lam / (2|B+|) * sum_i (S(a,p_i) - 1)^2``

    The min picks the lowest-index positive on ties and routes its gradient
    there. A gate argument of exactly 1 is clipped.
    """
    _require(rb)
    rb.check(batch.identity)
    s_pos, s_neg = _anchor_sims(batch, rb)
    i_min = int(np.argmin(s_pos.value))
    s_min = dc.take(s_pos, i_min)
    gated = dc.clip_gate(dc.exp(dc.add(dc.sub(s_neg, s_min), params.alpha)), 1.0)
    rank_term = dc.log(dc.add(dc.reduce_sum(gated), 1.0))
    dev = dc.sub(s_pos, 1.0)
    reg = dc.scale(dc.reduce_sum(dc.mul(dev, dev)), params.lam / (2.0 * len(rb.positives)))
    return dc.add(rank_term, reg)


def softmax_ce(logits, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` with max subtraction.

    ``logits`` may be a 1-D array (a fresh tape is made) or a Tensor.
    """
    if not isinstance(logits, Tensor):
        logits = Tape().param("logits", logits)
    if logits.ndim != 1:
        raise ValueError("softmax_ce expects a 1-D logit vector")
    if not 0 <= label < logits.shape[0]:
        raise IndexError(f"label {label} out of range for {logits.shape[0]} logits")
    shifted = dc.sub(logits, float(np.max(logits.value)))
    lse = dc.log(dc.reduce_sum(dc.exp(shifted)))
    return dc.sub(lse, dc.take(shifted, int(label)))


def batch_softmax_ce(logits: Tensor, labels) -> Tensor:
    """Mean of ``softmax_ce`` over the rows of a (n, classes) logit matrix."""
    labels = np.asarray(labels, dtype=np.intp)
    n, c = logits.shape
    if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= c):
        raise IndexError("labels out of range for the logit matrix")
    shifted = dc.sub(logits, np.max(logits.value, axis=1, keepdims=True))
    lse = dc.log(dc.reduce_sum(dc.exp(shifted), axis=1))
    picked = dc.take(shifted, (np.arange(n), labels))
    return dc.reduce_mean(dc.sub(lse, picked))


# ------------------------------------------------------------ batch reductions


def _label_masks(identity):
    identity = np.asarray(identity)
    same = identity[:, None] == identity[None, :]
    pos = same.copy()
    np.fill_diagonal(pos, False)
    return pos, ~same


def anchor_rows(identity) -> np.ndarray:
    """Rows that have at least one positive and one negative in the batch."""
    pos, neg = _label_masks(identity)
    return np.flatnonzero(pos.any(axis=1) & neg.any(axis=1))


def _sim_rows(batch: EmbeddingBatch, rows) -> Tensor:
    x = batch.features
    return dc.take(dc.dot(x, x), rows)


def _fused(sims: Tensor, loss, grad, weights) -> Tensor:
    """Record ``sum_r weights[r] * loss[r]`` given ``grad[r] = d loss[r] / d sims[r]``."""
    value = float(np.dot(weights, loss))

    def vjp(g):
        return (g * weights[:, None] * grad,)

    return dc.custom([sims], np.asarray(value), vjp)


def _u8(mask):
    return np.ascontiguousarray(mask, dtype=np.uint8)


def batch_ranking_loss(batch: EmbeddingBatch, params: LossParams = LossParams()) -> Tensor:
    """Mean of ``ranking_loss`` with every row that has a positive serving as anchor."""
    rows = anchor_rows(batch.identity)
    if rows.size == 0:
        raise LossPreconditionError("batch has no anchor with both a positive and a negative")
    pos, neg = _label_masks(batch.identity)
    sims = _sim_rows(batch, rows)
    loss, grad = kernels.ranking_rows(
        np.ascontiguousarray(sims.value), _u8(pos[rows]), _u8(neg[rows]), float(params.alpha), float(params.lam)
    )
    return _fused(sims, loss, grad, np.full(rows.size, 1.0 / rows.size))


def batch_ranking_loss_full(batch: EmbeddingBatch) -> Tensor:
    """Mean of ``ranking_loss_full`` over valid anchors."""
    rows = anchor_rows(batch.identity)
    if rows.size == 0:
        raise LossPreconditionError("batch has no anchor with both a positive and a negative")
    pos, neg = _label_masks(batch.identity)
    sims = _sim_rows(batch, rows)
    loss, grad = kernels.ranking_full_rows(np.ascontiguousarray(sims.value), _u8(pos[rows]), _u8(neg[rows]))
    return _fused(sims, loss, grad, np.full(rows.size, 1.0 / rows.size))


def npair_pairs(identity) -> tuple[np.ndarray, np.ndarray]:
    """Ordered (anchor, positive) pairs of equal identity whose anchor has a negative."""
    pos, neg = _label_masks(identity)
    pos &= neg.any(axis=1)[:, None]
    a, p = np.nonzero(pos)
    return a, p


def batch_npair_loss(batch: EmbeddingBatch) -> Tensor:
    """Mean N-pair loss over every ordered (anchor, positive) pair in the batch."""
    a, p = npair_pairs(batch.identity)
    if a.size == 0:
        raise LossPreconditionError("batch has no (anchor, positive) pair with a negative")
    _, neg = _label_masks(batch.identity)
    sims = _sim_rows(batch, a)
    loss, grad = kernels.npair_rows(
        np.ascontiguousarray(sims.value), np.ascontiguousarray(p, dtype=np.intp), _u8(neg[a])
    )
    return _fused(sims, loss, grad, np.full(a.size, 1.0 / a.size))


def triplet_loss_hard(batch: EmbeddingBatch, margin: float = 0.2) -> Tensor:
    """Batch-hard triplet loss in similarity form.

    Mean over anchors of ``max(0, margin + max_n S(a,n) - min_p S(a,p))``.
    Anchors lacking a positive or a negative are skipped.
    """
    pos, neg = _label_masks(batch.identity)
    x = batch.features
    sims = dc.dot(x, x)
    loss, grad, valid = kernels.triplet_rows(np.ascontiguousarray(sims.value), _u8(pos), _u8(neg), float(margin))
    rows = np.flatnonzero(valid)
    if rows.size == 0:
        raise LossPreconditionError("every anchor lacks a positive or a negative")
    weights = np.where(valid != 0, 1.0 / rows.size, 0.0)
    return _fused(sims, loss, grad, weights)
