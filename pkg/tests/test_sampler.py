import numpy as np
import pytest

from maskrank.sampler import (
    BatchSampler,
    BatchSpec,
    DatasetIndex,
    InsufficientDataError,
    check_feasible,
    eligible_identities,
    sample_batch,
)


def make_index(counts):
    identity = np.concatenate([np.full(c, f"id{i:03d}") for i, c in enumerate(counts)])
    camera = np.arange(len(identity)) % 2
    return DatasetIndex.from_labels(identity, camera)


def check_batch(index, spec, batch):
    counts = {k: len(v) for k, v in index.by_identity.items()}
    k = counts[batch.anchor_identity]
    expected_pos = min(spec.P, k)
    assert len(batch.records) == spec.batch_size
    assert batch.n_pos == expected_pos and batch.n_neg == spec.batch_size - expected_pos
    pos, neg = batch.records[: batch.n_pos], batch.records[batch.n_pos:]
    assert len(set(pos.tolist())) == len(pos)
    assert all(index.identity[r] == batch.anchor_identity for r in pos)
    neg_ids = index.identity[neg]
    assert len(set(neg_ids.tolist())) == len(neg)
    assert batch.anchor_identity not in set(neg_ids.tolist())
    np.testing.assert_array_equal(batch.identity, index.identity[batch.records])


class TestSplit:
    def test_full_split(self):
        index = make_index([12] * 60)
        batch = sample_batch(index, BatchSpec(), np.random.Generator(np.random.PCG64(0)))
        assert (batch.n_pos, batch.n_neg) == (10, 54)

    @pytest.mark.parametrize("k", [2, 3, 7, 9, 10])
    def test_small_identity(self, k):
        index = make_index([k] + [1] * 70)
        batch = sample_batch(index, BatchSpec(), np.random.Generator(np.random.PCG64(1)))
        assert batch.anchor_identity == "id000"
        assert (batch.n_pos, batch.n_neg) == (k, 64 - k)

    def test_exact_negative_supply(self):
        # a 10-image identity needs 54 others; 55 identities is exactly enough
        ok = make_index([10] * 55)
        check_feasible(ok, BatchSpec())
        sample_batch(ok, BatchSpec(), np.random.Generator(np.random.PCG64(0)))
        short = make_index([10] * 54)
        with pytest.raises(InsufficientDataError, match="54"):
            check_feasible(short, BatchSpec())
        with pytest.raises(InsufficientDataError):
            sample_batch(short, BatchSpec(), np.random.Generator(np.random.PCG64(0)))

    def test_no_eligible_identity(self):
        index = make_index([1] * 80)
        assert eligible_identities(index) == []
        with pytest.raises(InsufficientDataError):
            sample_batch(index, BatchSpec(), np.random.Generator(np.random.PCG64(0)))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            BatchSpec(P=1, N=5)
        with pytest.raises(ValueError):
            BatchSpec(P=4, N=0)


class TestInvariants:
    def test_ten_thousand_batches(self):
        rng = np.random.Generator(np.random.PCG64(2))
        counts = rng.integers(1, 15, size=90)
        index = make_index(counts)
        spec = BatchSpec()
        sampler = BatchSampler(index, spec, seed=3)
        for _ in range(10_000):
            check_batch(index, spec, sampler.sample())

    def test_anchor_uniform_over_eligible(self):
        counts = [1, 3, 5, 8, 12] * 14
        index = make_index(counts)
        eligible = eligible_identities(index)
        sampler = BatchSampler(index, BatchSpec(4, 20), seed=9)
        n = 20_000
        hits = {k: 0 for k in eligible}
        for _ in range(n):
            hits[sampler.sample().anchor_identity] += 1
        p = 1.0 / len(eligible)
        sd = np.sqrt(n * p * (1 - p))
        assert max(abs(h - n * p) for h in hits.values()) < 5 * sd
        assert all(index.by_identity[k].size >= 2 for k in hits)

    def test_ranking_batch_view(self):
        index = make_index([6] * 20)
        batch = BatchSampler(index, BatchSpec(4, 10), seed=1).sample()
        rb = batch.ranking_batch(2)
        assert rb.anchor == 2
        assert rb.positives == (0, 1, 3)
        assert rb.negatives == tuple(range(4, 14))
        rb.check(batch.identity)
        with pytest.raises(IndexError):
            batch.ranking_batch(5)


class TestDeterminism:
    def test_same_seed_same_batches(self):
        index = make_index([8] * 70)
        a = BatchSampler(index, seed=42)
        b = BatchSampler(index, seed=42)
        for _ in range(50):
            np.testing.assert_array_equal(a.sample().records, b.sample().records)

    def test_different_seed_differs(self):
        index = make_index([8] * 70)
        a = [BatchSampler(index, seed=1).sample().records for _ in range(1)]
        b = [BatchSampler(index, seed=2).sample().records for _ in range(1)]
        assert not np.array_equal(a[0], b[0])

    def test_iterator(self):
        index = make_index([8] * 70)
        it = iter(BatchSampler(index, seed=0))
        assert len(next(it).records) == 64
