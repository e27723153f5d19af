"""Per-layer KV storage with logical eviction flags and a retained-score sidecar.

An eviction mask is a boolean array of shape ``(n_kv_heads, n_tokens)``;
``True`` keeps the entry. The recent window is the last ``window`` positions
of every head and must always be kept.
"""

from dataclasses import dataclass, field

import numpy as np

from kvevict.errors import (
    ConstraintViolation,
    DimensionError,
    InfeasibleBudgetError,
    StateError,
)


class LayerKVCache:
    """Keys and values of one layer, stored per kv-head.

    Eviction is logical: evicted entries stay in storage but are flagged and
    excluded from every later attention or scoring call. :meth:`compact`
    produces the physically rebuilt equivalent.
    """

    def __init__(self, n_kv_heads, head_dim, window):
        if n_kv_heads < 1 or head_dim < 1 or window < 1:
            raise DimensionError("n_kv_heads, head_dim and window must be >= 1")
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.window = window
        self._keys = [[] for _ in range(n_kv_heads)]
        self._values = [[] for _ in range(n_kv_heads)]
        self._retained = [[] for _ in range(n_kv_heads)]
        self._scores = [[] for _ in range(n_kv_heads)]

    def __repr__(self):
        lens = [len(k) for k in self._keys]
        return (
            f"LayerKVCache(n_kv_heads={self.n_kv_heads}, head_dim={self.head_dim}, "
            f"window={self.window}, lengths={lens}, retained={self.retained_count()})"
        )

    @classmethod
    def from_arrays(cls, keys, values, window):
        """Build a fully retained cache from ``(n_kv_heads, n, head_dim)`` arrays."""
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if keys.ndim != 3 or keys.shape != values.shape:
            raise DimensionError(f"keys {keys.shape} and values {values.shape} must match")
        cache = cls(keys.shape[0], keys.shape[2], window)
        for h in range(keys.shape[0]):
            cache._keys[h] = list(keys[h])
            cache._values[h] = list(values[h])
            cache._retained[h] = [True] * keys.shape[1]
            cache._scores[h] = [np.nan] * keys.shape[1]
        return cache

    def append_kv(self, head, k, v):
        k = np.asarray(k, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if k.shape != (self.head_dim,) or v.shape != (self.head_dim,):
            raise DimensionError(
                f"expected vectors of length {self.head_dim}, got {k.shape} and {v.shape}"
            )
        self._keys[head].append(k)
        self._values[head].append(v)
        self._retained[head].append(True)
        self._scores[head].append(np.nan)

    def append(self, ks, vs):
        """Append one token: ``ks`` and ``vs`` are ``(n_kv_heads, head_dim)``."""
        ks = np.asarray(ks, dtype=np.float64)
        vs = np.asarray(vs, dtype=np.float64)
        if ks.shape != (self.n_kv_heads, self.head_dim) or vs.shape != ks.shape:
            raise DimensionError(f"expected ({self.n_kv_heads}, {self.head_dim}) rows")
        for h in range(self.n_kv_heads):
            self.append_kv(h, ks[h], vs[h])

    def length(self, head=0):
        return len(self._keys[head])

    @property
    def n_tokens(self):
        lens = {len(k) for k in self._keys}
        if len(lens) != 1:
            raise StateError(f"heads have different lengths {sorted(lens)}")
        return lens.pop()

    def keys(self, head):
        """All stored keys of ``head`` (evicted ones included) as ``(n, d_h)``."""
        if not self._keys[head]:
            return np.empty((0, self.head_dim))
        return np.stack(self._keys[head])

    def values(self, head):
        if not self._values[head]:
            return np.empty((0, self.head_dim))
        return np.stack(self._values[head])

    def retained(self, head):
        return np.array(self._retained[head], dtype=bool)

    def mask(self):
        """Current retained flags as an ``(n_kv_heads, n_tokens)`` array."""
        return np.stack([self.retained(h) for h in range(self.n_kv_heads)])

    def scores(self, head):
        """Stored scores of ``head``; NaN where no score is held."""
        return np.array(self._scores[head], dtype=np.float64)

    def window_start(self, head=0):
        return max(0, self.length(head) - self.window)

    def retained_count(self):
        return int(sum(sum(r) for r in self._retained))

    def apply_mask(self, mask):
        """Evict every entry whose mask bit is 0.

        Eviction is permanent, so a 1 bit on an already evicted entry leaves
        it evicted. Clearing a window bit raises :class:`ConstraintViolation`.
        """
        rows = self._mask_rows(mask)
        for h, row in enumerate(rows):
            start = self.window_start(h)
            if not row[start:].all():
                raise ConstraintViolation(
                    f"mask evicts a recent-window entry of kv-head {h}"
                )
        for h, row in enumerate(rows):
            keep = np.asarray(self._retained[h]) & row
            self._retained[h] = keep.tolist()
            self._scores[h] = [s if k else np.nan for s, k in zip(self._scores[h], keep)]

    def store_scores(self, head, positions, values):
        """Record scores for retained entries of ``head``."""
        for p, s in zip(positions, values):
            if self._retained[head][p]:
                self._scores[head][p] = float(s)

    def compact(self):
        """Physically rebuilt cache holding only the retained entries."""
        out = LayerKVCache(self.n_kv_heads, self.head_dim, self.window)
        for h in range(self.n_kv_heads):
            for k, v, r, s in zip(
                self._keys[h], self._values[h], self._retained[h], self._scores[h]
            ):
                if r:
                    out._keys[h].append(k)
                    out._values[h].append(v)
                    out._retained[h].append(True)
                    out._scores[h].append(s)
        return out

    def copy(self):
        out = LayerKVCache(self.n_kv_heads, self.head_dim, self.window)
        out._keys = [list(k) for k in self._keys]
        out._values = [list(v) for v in self._values]
        out._retained = [list(r) for r in self._retained]
        out._scores = [list(s) for s in self._scores]
        return out

    def _mask_rows(self, mask):
        if len(mask) != self.n_kv_heads:
            raise DimensionError(f"mask has {len(mask)} rows, cache has {self.n_kv_heads} heads")
        rows = []
        for h, row in enumerate(mask):
            row = np.asarray(row, dtype=bool)
            if row.shape != (self.length(h),):
                raise DimensionError(
                    f"mask row {h} has length {row.size}, head holds {self.length(h)}"
                )
            rows.append(row)
        return rows


def append_kv(cache, head, k, v):
    cache.append_kv(head, k, v)


def apply_mask(cache, mask):
    cache.apply_mask(mask)


def retained_count(cache):
    return cache.retained_count()


def window_mask(n_kv_heads, n_tokens, window):
    """Mask that keeps only the recent window of every head."""
    m = np.zeros((n_kv_heads, n_tokens), dtype=bool)
    m[:, max(0, n_tokens - window):] = True
    return m


@dataclass
class BudgetPlan:
    """Realised budgets of one compression run.

    ``per_head[l][h]`` is the number of entries kv-head ``h`` of layer ``l``
    retains; ``rounds`` records the layer budgets after every recompression
    round (one entry per round, covering the layers prefilled so far).
    """

    total: int
    per_layer: list
    per_head: list
    rounds: list = field(default_factory=list)

    def validate(self, n_kv_heads, window):
        if sum(self.per_layer) != self.total:
            raise InfeasibleBudgetError(
                f"layer budgets sum to {sum(self.per_layer)}, expected {self.total}"
            )
        for l, (b, heads) in enumerate(zip(self.per_layer, self.per_head)):
            if sum(heads) != b:
                raise InfeasibleBudgetError(f"layer {l}: head budgets sum to {sum(heads)} != {b}")
            if b < n_kv_heads * window:
                raise InfeasibleBudgetError(f"layer {l}: budget {b} below window floor")
