"""Pure-Python (numpy) implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Both must agree to floating-point accumulation error; the test suite runs
each kernel against both backends when the extension is built.
"""

from itertools import combinations, islice

import numpy as np

BACKEND = "python"

# Combinations evaluated per vectorised chunk; bounds peak memory.
_CHUNK = 4096


def maxpool1d(s, kernel):
    s = np.ascontiguousarray(s, dtype=np.float64)
    half = kernel // 2
    padded = np.pad(s, half, constant_values=-np.inf)
    return np.lib.stride_tricks.sliding_window_view(padded, kernel).max(axis=1)


def _combo_chunks(n_cand, keep):
    it = combinations(range(n_cand), keep)
    while True:
        block = list(islice(it, _CHUNK))
        if not block:
            return
        yield np.array(block, dtype=np.intp).reshape(len(block), keep)


def enumerate_min_loss(attn, values, w_o, base_mask, cand_head, cand_pos, keep, group):
    """Exhaustive minimum of the layer attention output L1 loss.

    ``attn`` is (H, N), ``values`` is (H, N, d_h) with each query head's
    group values already broadcast, ``w_o`` is (H*d_h, d). ``base_mask`` is
    the (H_kv, N) mask of always-kept entries; each combination additionally
    keeps ``keep`` of the candidates ``(cand_head[j], cand_pos[j])``.

    Returns ``(best_loss, best_combo)``; ties keep the first combination in
    lexicographic order.
    """
    attn = np.asarray(attn, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    n_heads, n_tok = attn.shape
    d_h = values.shape[2]
    cand_head = np.asarray(cand_head, dtype=np.intp)
    cand_pos = np.asarray(cand_pos, dtype=np.intp)
    n_cand = cand_head.shape[0]

    full = np.einsum("hn,hnd->hd", attn, values).reshape(-1)
    y = full @ w_o
    base = np.repeat(np.asarray(base_mask, dtype=bool), group, axis=0)

    best = np.inf
    best_combo = None
    for combos in _combo_chunks(n_cand, keep):
        m = combos.shape[0]
        mask = np.broadcast_to(base, (m, n_heads, n_tok)).copy()
        for q in range(group):
            heads = cand_head[combos] * group + q
            rows = np.repeat(np.arange(m), combos.shape[1])
            mask[rows, heads.reshape(-1), cand_pos[combos].reshape(-1)] = True
        kept = attn[None] * mask
        norm = kept.sum(axis=2, keepdims=True)
        z = np.einsum("mhn,hnd->mhd", kept / norm, values).reshape(m, n_heads * d_h)
        losses = np.abs(y[None] - z @ w_o).sum(axis=1)
        j = int(np.argmin(losses))
        if losses[j] < best:
            best = float(losses[j])
            best_combo = combos[j].copy()
    return best, best_combo


def enumerate_min_bound(attn, vbar, base_mask, cand_head, cand_pos, keep, group):
    """Exhaustive minimum of sum_h sum_i attn[h,i] * vbar[h] * (1 - mask[h,i]).

    The constant factor 2*C_hat is left to the caller. Same enumeration order
    and tie rule as :func:`enumerate_min_loss`.
    """
    attn = np.asarray(attn, dtype=np.float64)
    vbar = np.asarray(vbar, dtype=np.float64)
    n_heads, n_tok = attn.shape
    cand_head = np.asarray(cand_head, dtype=np.intp)
    cand_pos = np.asarray(cand_pos, dtype=np.intp)
    n_cand = cand_head.shape[0]
    base = np.repeat(np.asarray(base_mask, dtype=bool), group, axis=0)
    weight = attn * vbar[:, None]

    best = np.inf
    best_combo = None
    for combos in _combo_chunks(n_cand, keep):
        m = combos.shape[0]
        mask = np.broadcast_to(base, (m, n_heads, n_tok)).copy()
        for q in range(group):
            heads = cand_head[combos] * group + q
            rows = np.repeat(np.arange(m), combos.shape[1])
            mask[rows, heads.reshape(-1), cand_pos[combos].reshape(-1)] = True
        vals = (weight[None] * ~mask).sum(axis=(1, 2))
        j = int(np.argmin(vals))
        if vals[j] < best:
            best = float(vals[j])
            best_combo = combos[j].copy()
    return best, best_combo
