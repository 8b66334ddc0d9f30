import os
import subprocess
import sys

import numpy as np
import pytest

import oracles
from maskrank import kernels, losses

BACKENDS = kernels.backends()


def random_rows(rng, n_rows=6, n_cols=20):
    x = oracles.unit_rows(rng, n_cols, 5)
    identity = rng.integers(0, 4, size=n_cols)
    identity[:2] = identity[0]
    pos, neg = losses._label_masks(identity)
    rows = losses.anchor_rows(identity)[:n_rows]
    sims = np.ascontiguousarray((x @ x.T)[rows])
    return sims, pos[rows].astype(np.uint8), neg[rows].astype(np.uint8), identity, rows


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(5))


def test_fallback_always_available():
    assert "numpy" in BACKENDS
    assert kernels.BACKEND in BACKENDS


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled backend not built")
class TestBackendsAgree:
    def pairs(self):
        return BACKENDS["numpy"], BACKENDS["cython"]

    def test_ranking(self, rng):
        py, cy = self.pairs()
        for _ in range(100):
            sims, pos, neg, _, _ = random_rows(rng)
            a = py.ranking_rows(sims, pos, neg, 0.2, 1.0)
            b = cy.ranking_rows(sims, pos, neg, 0.2, 1.0)
            np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-14)
            np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-14)

    def test_full(self, rng):
        py, cy = self.pairs()
        for _ in range(100):
            sims, pos, neg, identity, rows = random_rows(rng)
            a, b = py.ranking_full_rows(sims, pos, neg), cy.ranking_full_rows(sims, pos, neg)
            np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-14)
            np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-14)

    def test_triplet(self, rng):
        py, cy = self.pairs()
        for _ in range(100):
            x, identity = oracles.mixed_batch(rng)
            pos, neg = losses._label_masks(identity)
            args = (np.ascontiguousarray(x @ x.T), pos.astype(np.uint8), neg.astype(np.uint8), 0.3)
            a, b = py.triplet_rows(*args), cy.triplet_rows(*args)
            for u, v in zip(a, b):
                np.testing.assert_array_equal(u, v)

    def test_npair(self, rng):
        py, cy = self.pairs()
        for _ in range(100):
            x, identity = oracles.mixed_batch(rng)
            a_idx, p_idx = losses.npair_pairs(identity)
            _, neg = losses._label_masks(identity)
            sims = np.ascontiguousarray((x @ x.T)[a_idx])
            args = (sims, np.ascontiguousarray(p_idx, dtype=np.intp), np.ascontiguousarray(neg[a_idx], dtype=np.uint8))
            a, b = py.npair_rows(*args), cy.npair_rows(*args)
            np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-14)
            np.testing.assert_allclose(a[1], b[1], rtol=0, atol=1e-14)

    def test_ap_cmc(self, rng):
        py, cy = self.pairs()
        for _ in range(100):
            n_q, n_g = 4, int(rng.integers(1, 15))
            order = np.ascontiguousarray(np.argsort(rng.normal(size=(n_q, n_g)), axis=1), dtype=np.intp)
            good = rng.integers(0, 2, size=(n_q, n_g)).astype(np.uint8)
            junk = (rng.integers(0, 4, size=(n_q, n_g)) == 0).astype(np.uint8) * (1 - good)
            a, b = py.ap_cmc_rows(order, good, junk), cy.ap_cmc_rows(order, good, junk)
            np.testing.assert_array_equal(a[1], b[1])
            np.testing.assert_allclose(a[0], b[0], rtol=0, atol=1e-15)


@pytest.mark.parametrize("name", sorted(BACKENDS))
class TestEachBackend:
    def test_ranking_row_without_positive_raises(self, name):
        mod = BACKENDS[name]
        sims = np.zeros((1, 3))
        with pytest.raises(ValueError):
            mod.ranking_rows(sims, np.zeros((1, 3), np.uint8), np.ones((1, 3), np.uint8), 0.2, 1.0)

    def test_triplet_skips_rows(self, name):
        mod = BACKENDS[name]
        sims = np.eye(3)
        pos = np.array([[0, 1, 0], [1, 0, 0], [0, 0, 0]], np.uint8)
        neg = np.array([[0, 0, 1], [0, 0, 1], [1, 1, 0]], np.uint8)
        loss, grad, valid = mod.triplet_rows(sims, pos, neg, 0.2)
        assert valid.tolist() == [1, 1, 0]
        assert loss.tolist() == pytest.approx([0.2, 0.2, 0.0])
        np.testing.assert_array_equal(grad[2], 0.0)

    def test_ap_no_good_match(self, name):
        mod = BACKENDS[name]
        order = np.array([[0, 1, 2]], dtype=np.intp)
        ap, first = mod.ap_cmc_rows(order, np.zeros((1, 3), np.uint8), np.zeros((1, 3), np.uint8))
        assert first[0] == -1


def test_env_forces_fallback():
    env = dict(os.environ, MASKRANK_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from maskrank import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
