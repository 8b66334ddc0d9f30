"""Numpy fallback for the hot loops in ``_ckernels.pyx``.

Both modules take the same arguments and return the same values. Each row
of ``sims`` holds one anchor's similarities to every batch row; ``pos`` and
``neg`` are uint8 masks of the same shape. Sums over a mask run in ascending
column order with sequential accumulation.
"""

import numpy as np

NAME = "numpy"


def _seqsum(x):
    return float(np.add.accumulate(x)[-1]) if x.size else 0.0


def ranking_rows(sims, pos, neg, alpha, lam):
    n, m = sims.shape
    loss = np.zeros(n)
    grad = np.zeros((n, m))
    for r in range(n):
        s = sims[r]
        p_idx = np.flatnonzero(pos[r])
        n_idx = np.flatnonzero(neg[r])
        if p_idx.size == 0 or n_idx.size == 0:
            raise ValueError(f"row {r} needs at least one positive and one negative")
        imin = p_idx[np.argmin(s[p_idx])]
        t = np.exp(s[n_idx] - s[imin] + alpha)
        active = t > 1.0
        total = _seqsum(t[active])
        denom = 1.0 + total
        d = s[p_idx] - 1.0
        reg = _seqsum(d * d)
        loss[r] = np.log(denom) + lam / (2.0 * p_idx.size) * reg
        g = grad[r]
        g[n_idx[active]] = t[active] / denom
        g[imin] -= total / denom
        g[p_idx] += (lam / p_idx.size) * d
    return loss, grad


def ranking_full_rows(sims, pos, neg):
    n, m = sims.shape
    loss = np.zeros(n)
    grad = np.zeros((n, m))
    for r in range(n):
        s = sims[r]
        p_idx = np.flatnonzero(pos[r])
        n_idx = np.flatnonzero(neg[r])
        if p_idx.size == 0 or n_idx.size == 0:
            raise ValueError(f"row {r} needs at least one positive and one negative")
        # row-major over (positive, negative) pairs
        e = np.exp(s[n_idx][None, :] - s[p_idx][:, None])
        total = _seqsum(e.reshape(-1))
        denom = 1.0 + total
        w = e / denom
        g = grad[r]
        g[n_idx] += w.sum(axis=0)
        g[p_idx] -= w.sum(axis=1)
        loss[r] = np.log(denom)
    return loss, grad


def npair_rows(sims, pos_index, neg):
    n, m = sims.shape
    loss = np.zeros(n)
    grad = np.zeros((n, m))
    for r in range(n):
        s = sims[r]
        p = int(pos_index[r])
        n_idx = np.flatnonzero(neg[r])
        if n_idx.size == 0:
            raise ValueError(f"row {r} has no negatives")
        e = np.exp(s[n_idx] - s[p])
        total = _seqsum(e)
        denom = 1.0 + total
        loss[r] = np.log(denom)
        grad[r, n_idx] = e / denom
        grad[r, p] -= total / denom
    return loss, grad


def triplet_rows(sims, pos, neg, margin):
    n, m = sims.shape
    loss = np.zeros(n)
    grad = np.zeros((n, m))
    valid = np.zeros(n, dtype=np.uint8)
    for r in range(n):
        s = sims[r]
        p_idx = np.flatnonzero(pos[r])
        n_idx = np.flatnonzero(neg[r])
        if p_idx.size == 0 or n_idx.size == 0:
            continue
        valid[r] = 1
        ip = p_idx[np.argmin(s[p_idx])]
        jn = n_idx[np.argmax(s[n_idx])]
        z = margin + s[jn] - s[ip]
        if z > 0:
            loss[r] = z
            grad[r, jn] = 1.0
            grad[r, ip] = -1.0
    return loss, grad, valid


def ap_cmc_rows(order, good, junk):
    """Average precision and first-hit position for ranked gallery rows.

    ``order[q]`` lists gallery indices best-first; ``good``/``junk`` are
    uint8 masks over gallery indices. Junk entries are dropped before
    positions are counted. ``first`` is -1 when a query has no good match.
    """
    nq = order.shape[0]
    ap = np.zeros(nq)
    first = np.full(nq, -1, dtype=np.int64)
    for q in range(nq):
        ranked = order[q]
        keep = junk[q][ranked] == 0
        hits = good[q][ranked][keep] != 0
        pos = np.flatnonzero(hits)
        if pos.size == 0:
            continue
        first[q] = pos[0]
        prec = np.arange(1, pos.size + 1) / (pos + 1.0)
        ap[q] = _seqsum(prec) / pos.size
    return ap, first
