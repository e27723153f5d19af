# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_pykernels``.

Signatures and tie rules are identical; see that module for the contracts.
"""

import numpy as np

from libc.math cimport fabs, INFINITY

BACKEND = "cython"


def maxpool1d(s, Py_ssize_t kernel):
    cdef const double[::1] src = np.ascontiguousarray(s, dtype=np.float64)
    cdef Py_ssize_t n = src.shape[0]
    cdef Py_ssize_t half = kernel // 2
    cdef Py_ssize_t i, j, lo, hi
    cdef double m
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] dst = out
    for i in range(n):
        lo = i - half if i > half else 0
        hi = i + half + 1 if i + half + 1 < n else n
        m = src[lo]
        for j in range(lo + 1, hi):
            if src[j] > m:
                m = src[j]
        dst[i] = m
    return out


cdef bint _next_combo(Py_ssize_t[::1] idx, Py_ssize_t k, Py_ssize_t n) nogil:
    cdef Py_ssize_t i = k - 1
    cdef Py_ssize_t j
    while i >= 0 and idx[i] == n - k + i:
        i -= 1
    if i < 0:
        return False
    idx[i] += 1
    for j in range(i + 1, k):
        idx[j] = idx[j - 1] + 1
    return True


def enumerate_min_loss(attn, values, w_o, base_mask, cand_head, cand_pos,
                       Py_ssize_t keep, Py_ssize_t group):
    cdef const double[:, ::1] a = np.ascontiguousarray(attn, dtype=np.float64)
    cdef const double[:, :, ::1] v = np.ascontiguousarray(values, dtype=np.float64)
    cdef const double[:, ::1] wo = np.ascontiguousarray(w_o, dtype=np.float64)
    cdef const unsigned char[:, ::1] base = np.ascontiguousarray(base_mask, dtype=np.uint8)
    cdef const Py_ssize_t[::1] ch = np.ascontiguousarray(cand_head, dtype=np.intp)
    cdef const Py_ssize_t[::1] cp = np.ascontiguousarray(cand_pos, dtype=np.intp)

    cdef Py_ssize_t n_heads = a.shape[0]
    cdef Py_ssize_t n_tok = a.shape[1]
    cdef Py_ssize_t d_h = v.shape[2]
    cdef Py_ssize_t d = wo.shape[1]
    cdef Py_ssize_t n_cand = ch.shape[0]
    cdef Py_ssize_t h, i, t, c, q, r, hh, pos

    if keep > n_cand:
        return np.inf, None

    full_np = np.zeros((n_heads, d_h))
    num0_np = np.zeros((n_heads, d_h))
    mass0_np = np.zeros(n_heads)
    cdef double[:, ::1] full = full_np
    cdef double[:, ::1] num0 = num0_np
    cdef double[::1] mass0 = mass0_np
    for h in range(n_heads):
        for i in range(n_tok):
            for t in range(d_h):
                full[h, t] += a[h, i] * v[h, i, t]
            if base[h // group, i]:
                mass0[h] += a[h, i]
                for t in range(d_h):
                    num0[h, t] += a[h, i] * v[h, i, t]

    y_np = np.zeros(d)
    cdef double[::1] y = y_np
    for h in range(n_heads):
        for t in range(d_h):
            for c in range(d):
                y[c] += full[h, t] * wo[h * d_h + t, c]

    num_np = np.empty((n_heads, d_h))
    mass_np = np.empty(n_heads)
    z_np = np.empty(n_heads * d_h)
    out_np = np.empty(d)
    idx_np = np.arange(keep, dtype=np.intp)
    best_np = idx_np.copy()
    cdef double[:, ::1] num = num_np
    cdef double[::1] mass = mass_np
    cdef double[::1] z = z_np
    cdef double[::1] out = out_np
    cdef Py_ssize_t[::1] idx = idx_np
    cdef Py_ssize_t[::1] best_idx = best_np
    cdef double best = INFINITY
    cdef double loss, acc
    cdef bint more = True

    with nogil:
        while more:
            num[:, :] = num0
            mass[:] = mass0
            for r in range(keep):
                pos = cp[idx[r]]
                for q in range(group):
                    hh = ch[idx[r]] * group + q
                    mass[hh] += a[hh, pos]
                    for t in range(d_h):
                        num[hh, t] += a[hh, pos] * v[hh, pos, t]
            for h in range(n_heads):
                for t in range(d_h):
                    z[h * d_h + t] = num[h, t] / mass[h]
            loss = 0.0
            for c in range(d):
                acc = 0.0
                for t in range(n_heads * d_h):
                    acc = acc + z[t] * wo[t, c]
                loss = loss + fabs(y[c] - acc)
            if loss < best:
                best = loss
                best_idx[:] = idx
            more = _next_combo(idx, keep, n_cand)
    return best, best_np


def enumerate_min_bound(attn, vbar, base_mask, cand_head, cand_pos,
                        Py_ssize_t keep, Py_ssize_t group):
    cdef const double[:, ::1] a = np.ascontiguousarray(attn, dtype=np.float64)
    cdef const double[::1] vb = np.ascontiguousarray(vbar, dtype=np.float64)
    cdef const unsigned char[:, ::1] base = np.ascontiguousarray(base_mask, dtype=np.uint8)
    cdef const Py_ssize_t[::1] ch = np.ascontiguousarray(cand_head, dtype=np.intp)
    cdef const Py_ssize_t[::1] cp = np.ascontiguousarray(cand_pos, dtype=np.intp)

    cdef Py_ssize_t n_heads = a.shape[0]
    cdef Py_ssize_t n_tok = a.shape[1]
    cdef Py_ssize_t n_kv = base.shape[0]
    cdef Py_ssize_t n_cand = ch.shape[0]
    cdef Py_ssize_t h, i, r

    if keep > n_cand:
        return np.inf, None

    mask_np = np.empty((n_kv, n_tok), dtype=np.uint8)
    idx_np = np.arange(keep, dtype=np.intp)
    best_np = idx_np.copy()
    cdef unsigned char[:, ::1] mask = mask_np
    cdef Py_ssize_t[::1] idx = idx_np
    cdef Py_ssize_t[::1] best_idx = best_np
    cdef double best = INFINITY
    cdef double total
    cdef bint more = True

    with nogil:
        while more:
            mask[:, :] = base
            for r in range(keep):
                mask[ch[idx[r]], cp[idx[r]]] = 1
            total = 0.0
            for h in range(n_heads):
                for i in range(n_tok):
                    if not mask[h // group, i]:
                        total = total + a[h, i] * vb[h]
            if total < best:
                best = total
                best_idx[:] = idx
            more = _next_combo(idx, keep, n_cand)
    return best, best_np
