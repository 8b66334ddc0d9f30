"""Gallery ranking and CMC / mAP under single- and multiple-query protocols.

For each query, gallery entries sharing both its identity and its camera are
dropped (junk) before ranks are counted; the remaining same-identity entries
are the correct matches. Queries without any correct match are skipped and
counted in ``EvalReport.skipped``.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .diffcore import EPS_NORM, DegenerateVectorError

UNIT_TOL = 1e-6


class EvaluationError(ValueError):
    pass


@dataclass
class FeatureSet:
    features: np.ndarray
    identity: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1 and self.features.size == 0:
            self.features = self.features.reshape(0, 0)
        self.identity = np.asarray(self.identity)
        self.camera = np.asarray(self.camera)
        n = self.features.shape[0]
        if self.features.ndim != 2 or len(self.identity) != n or len(self.camera) != n:
            raise EvaluationError("features, identity and camera must have matching lengths")
        if n:
            norms = np.sqrt(np.sum(self.features * self.features, axis=1))
            if np.any(np.abs(norms - 1.0) > UNIT_TOL):
                raise EvaluationError("feature rows must be unit-norm")

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass
class EvalReport:
    cmc: np.ndarray
    map: float
    per_query: list = field(default_factory=list)
    skipped: int = 0

    def rank(self, k: int) -> float:
        if self.cmc.size == 0:
            return 0.0
        return float(self.cmc[min(k, self.cmc.size) - 1])

    def to_json(self) -> dict:
        return {
            "rank1": self.rank(1),
            "rank5": self.rank(5),
            "rank10": self.rank(10),
            "map": float(self.map),
            "cmc": [float(v) for v in self.cmc],
            "skipped": int(self.skipped),
        }


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MASKRANK_THREADS", "1")))
    except ValueError:
        return 1


def _order(sims: np.ndarray) -> np.ndarray:
    # stable sort of negated scores: descending similarity, ties by ascending index
    return np.argsort(-sims, axis=-1, kind="stable")


def rank_gallery(query, gallery: FeatureSet) -> np.ndarray:
    """Gallery indices by descending similarity, ties broken by index."""
    if len(gallery) == 0:
        raise EvaluationError("gallery is empty")
    query = np.asarray(query, dtype=np.float64)
    if query.shape != (gallery.dim,):
        raise EvaluationError(f"query dim {query.shape} does not match gallery dim {gallery.dim}")
    return _order(gallery.features @ query)


def _evaluate_block(qf, qid, qcam, gallery: FeatureSet):
    order = np.ascontiguousarray(_order(qf @ gallery.features.T), dtype=np.intp)
    same_id = qid[:, None] == gallery.identity[None, :]
    same_cam = qcam[:, None] == gallery.camera[None, :]
    junk = np.ascontiguousarray(same_id & same_cam, dtype=np.uint8)
    good = np.ascontiguousarray(same_id & ~same_cam, dtype=np.uint8)
    return kernels.ap_cmc_rows(order, good, junk)


def evaluate_single_query(queries: FeatureSet, gallery: FeatureSet) -> EvalReport:
    if len(gallery) == 0:
        raise EvaluationError("gallery is empty")
    if len(queries) and queries.dim != gallery.dim:
        raise EvaluationError("query and gallery dimensions differ")
    nq = len(queries)
    threads = min(_threads(), max(nq, 1))
    bounds = np.linspace(0, nq, threads + 1).astype(int)
    blocks = [(bounds[i], bounds[i + 1]) for i in range(threads)]

    def run(b):
        lo, hi = b
        return _evaluate_block(queries.features[lo:hi], queries.identity[lo:hi], queries.camera[lo:hi], gallery)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, blocks))
    else:
        parts = [run(b) for b in blocks]
    ap = np.concatenate([p[0] for p in parts]) if parts else np.zeros(0)
    first = np.concatenate([p[1] for p in parts]) if parts else np.zeros(0, dtype=np.int64)

    valid = first >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise EvaluationError("no query has a valid gallery match")
    hist = np.bincount(first[valid], minlength=len(gallery))
    cmc = np.cumsum(hist) / n_valid
    per_query = [float(v) for v in ap[valid]]
    return EvalReport(cmc=cmc, map=float(np.mean(ap[valid])), per_query=per_query, skipped=nq - n_valid)


def multi_query_pool(features, mode: str = "mean") -> np.ndarray:
    """Pool one identity-camera group into a single unit vector."""
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if f.shape[0] == 0:
        raise EvaluationError("cannot pool an empty group")
    if f.shape[0] == 1:
        # rows are already unit-norm; renormalizing could flip low bits
        return f[0].copy()
    if mode == "mean":
        v = f.mean(axis=0)
    elif mode == "max":
        v = f.max(axis=0)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    norm = float(np.sqrt(np.sum(v * v)))
    if norm <= EPS_NORM:
        raise DegenerateVectorError("pooled query feature has (near) zero norm")
    return v / norm


def pool_queries(queries: FeatureSet, mode: str = "mean") -> FeatureSet:
    """One pooled query per (identity, camera) group, in first-appearance order."""
    groups: dict = {}
    for i, key in enumerate(zip(queries.identity.tolist(), queries.camera.tolist())):
        groups.setdefault(key, []).append(i)
    if not groups:
        return queries
    feats = np.stack([multi_query_pool(queries.features[rows], mode) for rows in groups.values()])
    ids = np.array([k[0] for k in groups], dtype=queries.identity.dtype)
    cams = np.array([k[1] for k in groups], dtype=queries.camera.dtype)
    return FeatureSet(feats, ids, cams)


def evaluate(queries: FeatureSet, gallery: FeatureSet, protocol: str = "single", pool: str = "mean") -> EvalReport:
    if protocol == "single":
        return evaluate_single_query(queries, gallery)
    if protocol == "multi":
        return evaluate_single_query(pool_queries(queries, pool), gallery)
    raise ValueError(f"unknown protocol {protocol!r}")
