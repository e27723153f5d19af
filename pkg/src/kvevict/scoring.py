"""Token-importance scores for every eviction policy.

Each score function returns one value per cache position (length N); the
engine only ranks positions outside the recent window. ``recent`` is the
``(w, N)`` block of attention rows of the last ``w`` streams of one head.
"""

import numpy as np

from kvevict.errors import ConfigError, DimensionError, DomainError, StateError
from kvevict.numerics import maxpool1d

POLICIES = ("lava", "snapkv", "h2o", "tova", "cake", "vatp")

DEFAULT_POOL_KERNEL = 7


def _window_rows(recent, w):
    recent = np.asarray(recent, dtype=np.float64)
    if recent.ndim != 2:
        raise DimensionError(f"recent attention must be (rows, N), got {recent.shape}")
    if w < 1:
        raise ConfigError(f"window must be >= 1, got {w}")
    if recent.shape[0] < w:
        raise StateError(f"need {w} recent attention rows, have {recent.shape[0]}")
    return recent[-w:]


def value_norm_max(values):
    """Largest L1 norm over a head's value vectors."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2 or values.shape[0] == 0:
        raise DomainError("value_norm_max needs a non-empty (N, d_h) array")
    return float(np.abs(values).sum(axis=1).max())


def lava_score(recent, vbar, w):
    """Window-mean attention scaled by the head's largest value L1 norm."""
    rows = _window_rows(recent, w)
    return (vbar / w) * rows.sum(axis=0)


def snapkv_score(recent, w):
    rows = _window_rows(recent, w)
    return rows.sum(axis=0) / w


def h2o_score(full_attention):
    """Accumulated attention each position receives from later streams.

    ``full_attention`` is the N x N lower-triangular matrix (or a ragged
    list whose row ``j`` has ``j + 1`` entries). The diagonal is excluded.
    """
    rows = list(full_attention)
    if not rows:
        raise StateError("h2o needs at least one attention row")
    n = len(rows[-1]) if not isinstance(full_attention, np.ndarray) else full_attention.shape[1]
    if len(rows) != n:
        raise StateError(f"h2o needs all {n} attention rows, got {len(rows)}")
    s = np.zeros(n)
    for j, row in enumerate(rows):
        row = np.asarray(row, dtype=np.float64)
        s[:j] += row[:j]
    return s


def tova_score(last_row):
    return np.array(last_row, dtype=np.float64)


def cake_score(recent, w, gamma):
    """Window mean plus ``gamma`` times the population variance over the window."""
    if gamma < 0:
        raise ConfigError(f"cake gamma must be >= 0, got {gamma}")
    rows = _window_rows(recent, w)
    return rows.mean(axis=0) + gamma * rows.var(axis=0)


def vatp_score(recent, w, values):
    """Window-mean attention scaled by each token's own value L1 norm."""
    rows = _window_rows(recent, w)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rows.shape[1]:
        raise DimensionError(f"{values.shape[0]} values for {rows.shape[1]} positions")
    return np.abs(values).sum(axis=1) / w * rows.sum(axis=0)


def pool_scores(s, kernel=DEFAULT_POOL_KERNEL):
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        return maxpool1d(s, kernel)
    return np.stack([maxpool1d(row, kernel) for row in s])


def gqa_reduce_max(group_scores):
    """Elementwise max over the query heads sharing one kv-head."""
    rows = [np.asarray(r, dtype=np.float64) for r in group_scores]
    if not rows:
        raise DimensionError("gqa_reduce_max needs at least one row")
    if len({r.shape for r in rows}) != 1:
        raise DimensionError("ragged score rows in one GQA group")
    return np.max(np.stack(rows), axis=0)


def theorem1_term(a, vbar):
    """Per-entry eviction cost in the L1 output-loss bound: ``a * vbar``."""
    return a * vbar


def head_scores(policy, recent, values, w, *, last_row=None, full_attention=None, gamma=0.0):
    """Score one query head under ``policy``; returns a length-N row."""
    if policy == "lava":
        return lava_score(recent, value_norm_max(values), w)
    if policy == "snapkv":
        return snapkv_score(recent, w)
    if policy == "tova":
        row = recent[-1] if last_row is None else last_row
        return tova_score(row)
    if policy == "cake":
        return cake_score(recent, w, gamma)
    if policy == "vatp":
        return vatp_score(recent, w, values)
    if policy == "h2o":
        if full_attention is None:
            raise StateError("h2o scoring needs the full attention matrix (diagnostic mode)")
        return h2o_score(full_attention)
    raise ConfigError(f"unknown scoring policy {policy!r}; expected one of {POLICIES}")


def layer_scores(policy, recent, values, w, *, full_attention=None, gamma=0.0, kernel=None):
    """Scores of one layer at kv-head granularity, restricted to scored positions.

    ``recent`` is (H, w, N) and ``values`` is (H_kv, N, d_h). Query-head
    rows are scored, max-reduced within each GQA group, then (if ``kernel``
    is given) max-pooled over the scored positions only, so window
    attention never leaks into the ranking. Returns (H_kv, N - w).
    """
    recent = np.asarray(recent, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    n_heads = recent.shape[0]
    n_kv, n_tok, _ = values.shape
    group = n_heads // n_kv
    rows = []
    for g in range(n_kv):
        per_head = [
            head_scores(
                policy,
                recent[h],
                values[g],
                w,
                full_attention=None if full_attention is None else full_attention[h],
                gamma=gamma,
            )
            for h in range(g * group, (g + 1) * group)
        ]
        rows.append(gqa_reduce_max(per_head)[: n_tok - w])
    out = np.stack(rows)
    if kernel is not None and kernel > 1:
        out = pool_scores(out, kernel)
    return out


def value_norm_per_head(values, n_heads):
    """V-bar of every query head (each inherits its kv-head's value)."""
    values = np.asarray(values, dtype=np.float64)
    n_kv = values.shape[0]
    per_kv = np.array([value_norm_max(values[g]) for g in range(n_kv)])
    return np.repeat(per_kv, n_heads // n_kv)
