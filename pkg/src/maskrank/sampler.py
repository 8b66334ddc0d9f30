"""Identity-balanced batch construction.

One identity supplies P images; N further rows come from N distinct other
identities, one image each. If the chosen identity has only k < P images the
split becomes k / (batch_size - k).

Randomness comes from ``numpy.random.Generator(PCG64(seed))``; the draw order
per batch is: anchor identity (``integers``), positive images (``choice``
without replacement), negative identities (``choice`` without replacement),
then one ``integers`` draw per negative identity for its image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import RankingBatch


class InsufficientDataError(ValueError):
    """The index cannot fill a batch of the requested shape."""


@dataclass
class DatasetIndex:
    identity: np.ndarray
    camera: np.ndarray
    by_identity: dict

    @classmethod
    def from_labels(cls, identity, camera=None) -> "DatasetIndex":
        identity = np.asarray(identity)
        camera = np.asarray(camera) if camera is not None else np.zeros(len(identity), dtype=int)
        groups: dict = {}
        for i, ident in enumerate(identity.tolist()):
            groups.setdefault(ident, []).append(i)
        by_identity = {k: np.asarray(groups[k], dtype=np.intp) for k in sorted(groups)}
        return cls(identity, camera, by_identity)

    @property
    def identities(self) -> list:
        return list(self.by_identity)


@dataclass(frozen=True)
class BatchSpec:
    P: int = 10
    N: int = 54

    def __post_init__(self):
        if self.P < 2 or self.N < 1:
            raise ValueError(f"need P >= 2 and N >= 1, got P={self.P}, N={self.N}")

    @property
    def batch_size(self) -> int:
        return self.P + self.N


@dataclass
class SampledBatch:
    records: np.ndarray
    identity: np.ndarray
    anchor_identity: object
    n_pos: int

    @property
    def n_neg(self) -> int:
        return len(self.records) - self.n_pos

    def ranking_batch(self, anchor: int = 0) -> RankingBatch:
        if not 0 <= anchor < self.n_pos:
            raise IndexError("anchor must be one of the positive-identity rows")
        pos = [i for i in range(self.n_pos) if i != anchor]
        return RankingBatch(anchor, tuple(pos), tuple(range(self.n_pos, len(self.records))))


def eligible_identities(index: DatasetIndex) -> list:
    """Identities with at least two images, ascending."""
    return [k for k, rows in index.by_identity.items() if len(rows) >= 2]


def sample_batch(index: DatasetIndex, spec: BatchSpec, rng: np.random.Generator) -> SampledBatch:
    eligible = eligible_identities(index)
    if not eligible:
        raise InsufficientDataError("no identity has two or more images")
    anchor_id = eligible[int(rng.integers(len(eligible)))]
    images = index.by_identity[anchor_id]
    n_pos = min(spec.P, len(images))
    n_neg = spec.batch_size - n_pos
    others = [k for k in index.by_identity if k != anchor_id]
    if len(others) < n_neg:
        raise InsufficientDataError(
            f"need {n_neg} identities besides {anchor_id!r} for a {n_pos}/{n_neg} batch, have {len(others)}"
        )
    pos_rows = rng.choice(images, size=n_pos, replace=False)
    neg_ids = rng.choice(len(others), size=n_neg, replace=False)
    neg_rows = []
    for j in neg_ids:
        rows = index.by_identity[others[int(j)]]
        neg_rows.append(rows[int(rng.integers(len(rows)))])
    records = np.concatenate([pos_rows, np.asarray(neg_rows, dtype=np.intp)]).astype(np.intp)
    return SampledBatch(records, index.identity[records], anchor_id, n_pos)


def check_feasible(index: DatasetIndex, spec: BatchSpec) -> None:
    """Raise InsufficientDataError unless every eligible anchor can fill a batch."""
    eligible = eligible_identities(index)
    if not eligible:
        raise InsufficientDataError("no identity has two or more images")
    n_other = len(index.by_identity) - 1
    worst = max(spec.batch_size - min(spec.P, len(index.by_identity[k])) for k in eligible)
    if n_other < worst:
        raise InsufficientDataError(
            f"batch spec {spec.P}/{spec.N} needs up to {worst} negative identities, index has {n_other}"
        )


class BatchSampler:
    """Owns a seeded PCG64 generator and yields batches from one index."""

    def __init__(self, index: DatasetIndex, spec: BatchSpec = BatchSpec(), seed: int = 0):
        self.index = index
        self.spec = spec
        self.rng = np.random.Generator(np.random.PCG64(seed))

    def sample(self) -> SampledBatch:
        return sample_batch(self.index, self.spec, self.rng)

    def __iter__(self):
        while True:
            yield self.sample()
