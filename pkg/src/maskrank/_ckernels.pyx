# cython: language_level=3
"""Compiled loops for the batch losses and CMC/AP evaluation.

Semantics match ``_pykernels`` exactly; see that module for the contract.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

NAME = "cython"


def ranking_rows(const double[:, ::1] sims, const unsigned char[:, ::1] pos,
                 const unsigned char[:, ::1] neg, double alpha, double lam):
    cdef Py_ssize_t n = sims.shape[0], m = sims.shape[1]
    cdef Py_ssize_t r, j, imin, npos, nneg
    cdef double smin, t, total, denom, d, reg
    loss_arr = np.zeros(n)
    grad_arr = np.zeros((n, m))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    for r in range(n):
        imin = -1
        npos = 0
        nneg = 0
        smin = 0.0
        for j in range(m):
            if pos[r, j]:
                npos += 1
                if imin < 0 or sims[r, j] < smin:
                    imin = j
                    smin = sims[r, j]
            if neg[r, j]:
                nneg += 1
        if npos == 0 or nneg == 0:
            raise ValueError(f"row {r} needs at least one positive and one negative")
        total = 0.0
        for j in range(m):
            if neg[r, j]:
                t = exp(sims[r, j] - smin + alpha)
                if t > 1.0:
                    total += t
        denom = 1.0 + total
        reg = 0.0
        for j in range(m):
            if pos[r, j]:
                d = sims[r, j] - 1.0
                reg += d * d
        loss[r] = log(denom) + lam / (2.0 * npos) * reg
        for j in range(m):
            if neg[r, j]:
                t = exp(sims[r, j] - smin + alpha)
                if t > 1.0:
                    grad[r, j] = t / denom
        grad[r, imin] -= total / denom
        for j in range(m):
            if pos[r, j]:
                grad[r, j] += (lam / npos) * (sims[r, j] - 1.0)
    return loss_arr, grad_arr


def ranking_full_rows(const double[:, ::1] sims, const unsigned char[:, ::1] pos,
                      const unsigned char[:, ::1] neg):
    cdef Py_ssize_t n = sims.shape[0], m = sims.shape[1]
    cdef Py_ssize_t r, i, j, npos, nneg
    cdef double total, denom, w
    loss_arr = np.zeros(n)
    grad_arr = np.zeros((n, m))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    for r in range(n):
        npos = 0
        nneg = 0
        total = 0.0
        for i in range(m):
            if pos[r, i]:
                npos += 1
                for j in range(m):
                    if neg[r, j]:
                        total += exp(sims[r, j] - sims[r, i])
        for j in range(m):
            if neg[r, j]:
                nneg += 1
        if npos == 0 or nneg == 0:
            raise ValueError(f"row {r} needs at least one positive and one negative")
        denom = 1.0 + total
        for i in range(m):
            if pos[r, i]:
                for j in range(m):
                    if neg[r, j]:
                        w = exp(sims[r, j] - sims[r, i]) / denom
                        grad[r, j] += w
                        grad[r, i] -= w
        loss[r] = log(denom)
    return loss_arr, grad_arr


def npair_rows(const double[:, ::1] sims, const cnp.intp_t[::1] pos_index,
               const unsigned char[:, ::1] neg):
    cdef Py_ssize_t n = sims.shape[0], m = sims.shape[1]
    cdef Py_ssize_t r, j, p, nneg
    cdef double total, denom, sp
    loss_arr = np.zeros(n)
    grad_arr = np.zeros((n, m))
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    for r in range(n):
        p = pos_index[r]
        sp = sims[r, p]
        total = 0.0
        nneg = 0
        for j in range(m):
            if neg[r, j]:
                nneg += 1
                total += exp(sims[r, j] - sp)
        if nneg == 0:
            raise ValueError(f"row {r} has no negatives")
        denom = 1.0 + total
        loss[r] = log(denom)
        for j in range(m):
            if neg[r, j]:
                grad[r, j] = exp(sims[r, j] - sp) / denom
        grad[r, p] -= total / denom
    return loss_arr, grad_arr


def triplet_rows(const double[:, ::1] sims, const unsigned char[:, ::1] pos,
                 const unsigned char[:, ::1] neg, double margin):
    cdef Py_ssize_t n = sims.shape[0], m = sims.shape[1]
    cdef Py_ssize_t r, j, ip, jn
    cdef double z
    loss_arr = np.zeros(n)
    grad_arr = np.zeros((n, m))
    valid_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] loss = loss_arr
    cdef double[:, ::1] grad = grad_arr
    cdef unsigned char[::1] valid = valid_arr
    for r in range(n):
        ip = -1
        jn = -1
        for j in range(m):
            if pos[r, j] and (ip < 0 or sims[r, j] < sims[r, ip]):
                ip = j
            if neg[r, j] and (jn < 0 or sims[r, j] > sims[r, jn]):
                jn = j
        if ip < 0 or jn < 0:
            continue
        valid[r] = 1
        z = margin + sims[r, jn] - sims[r, ip]
        if z > 0:
            loss[r] = z
            grad[r, jn] = 1.0
            grad[r, ip] = -1.0
    return loss_arr, grad_arr, valid_arr


def ap_cmc_rows(const cnp.intp_t[:, ::1] order, const unsigned char[:, ::1] good,
                const unsigned char[:, ::1] junk):
    cdef Py_ssize_t nq = order.shape[0], ng = order.shape[1]
    cdef Py_ssize_t q, r, g, position, hits
    cdef double acc
    ap_arr = np.zeros(nq)
    first_arr = np.full(nq, -1, dtype=np.int64)
    cdef double[::1] ap = ap_arr
    cdef long long[::1] first = first_arr
    for q in range(nq):
        position = 0
        hits = 0
        acc = 0.0
        for r in range(ng):
            g = order[q, r]
            if junk[q, g]:
                continue
            position += 1
            if good[q, g]:
                hits += 1
                if hits == 1:
                    first[q] = position - 1
                acc += <double>hits / <double>position
        if hits:
            ap[q] = acc / hits
    return ap_arr, first_arr
