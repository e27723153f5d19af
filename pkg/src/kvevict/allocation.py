"""Layer- and head-level budget allocation.

Every strategy produces real-valued shares, clamps them between a per-layer
floor (the recent window, ``n_kv_heads * window``) and an optional cap, and
rounds with the largest-remainder rule so the integer budgets sum to the
total exactly. Equal remainders go to the lower index.
"""

import warnings

import numpy as np

from kvevict.errors import ConfigError, DomainError, InfeasibleBudgetError
from kvevict.numerics import top_k_indices

STRATEGIES = ("uniform", "pyramid", "cake", "lava-entropy")

# Floor applied to CAKE's entropy and variance before exponentiation.
CAKE_FLOOR = 1e-12


def _bounds(value, n, default):
    if value is None:
        return np.full(n, default, dtype=np.float64)
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return np.full(n, float(arr))
    if arr.shape != (n,):
        raise ConfigError(f"expected {n} bounds, got shape {arr.shape}")
    return arr


def water_fill(weights, total, lower, upper):
    """Real shares ``clip(lam * weights, lower, upper)`` summing to ``total``.

    Classic box-constrained projection: repeatedly pin whichever side
    (floor or cap) carries the larger total violation, then rescale the
    remaining free layers.
    """
    weights = np.asarray(weights, dtype=np.float64)
    n = weights.size
    lo = _bounds(lower, n, 0.0)
    hi = _bounds(upper, n, np.inf)
    if total < lo.sum() - 1e-9:
        raise InfeasibleBudgetError(f"total {total} is below the summed floor {lo.sum():g}")
    if total > hi.sum() + 1e-9:
        raise InfeasibleBudgetError(f"total {total} exceeds the summed capacity {hi.sum():g}")
    fixed = np.full(n, np.nan)
    while True:
        free = np.isnan(fixed)
        if not free.any():
            return fixed
        rem = total - np.nansum(fixed)
        w = np.where(free, weights, 0.0)
        if w.sum() <= 0:
            w = free.astype(np.float64)
        q = np.where(free, rem * w / w.sum(), fixed)
        low = free & (q < lo)
        high = free & (q > hi)
        if not low.any() and not high.any():
            return q
        if (lo - q)[low].sum() >= (q - hi)[high].sum():
            fixed[low] = lo[low]
        else:
            fixed[high] = hi[high]


def largest_remainder(quotas, total, lower=None, upper=None):
    """Round ``quotas`` to integers summing to ``total``.

    Starts from the floors and hands out the missing units by descending
    fractional part (lower index first on ties), never exceeding ``upper``.
    """
    q = np.asarray(quotas, dtype=np.float64)
    n = q.size
    lo = _bounds(lower, n, 0.0)
    hi = _bounds(upper, n, np.inf)
    out = np.clip(np.floor(q + 1e-9), lo, hi).astype(np.int64)
    deficit = int(total) - int(out.sum())
    while deficit > 0:
        frac = q - out
        frac[out >= hi] = -np.inf
        eligible = int(np.isfinite(frac).sum())
        if eligible == 0:
            raise InfeasibleBudgetError("no room left to place the remaining budget")
        take = top_k_indices(frac, min(deficit, eligible))
        out[take] += 1
        deficit -= take.size
    while deficit < 0:
        frac = q - out
        frac[out <= lo] = np.inf
        eligible = int(np.isfinite(frac).sum())
        if eligible == 0:
            raise InfeasibleBudgetError("cannot shed budget without breaking a floor")
        take = top_k_indices(-frac, min(-deficit, eligible))
        out[take] -= 1
        deficit += take.size
    return [int(b) for b in out]


def apportion(weights, total, floor=0, cap=None):
    """Split ``total`` proportionally to ``weights`` within ``[floor, cap]``."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        raise ConfigError("nothing to allocate to")
    if (weights < 0).any():
        raise DomainError("allocation weights must be non-negative")
    if weights.sum() <= 0:
        if weights.size > 1:
            warnings.warn("all allocation weights are zero; falling back to uniform", RuntimeWarning)
        weights = np.ones_like(weights)
    q = water_fill(weights, total, floor, cap)
    return largest_remainder(q, total, floor, cap)


def uniform_layer_budgets(total, n_layers, floor=0, cap=None):
    if total < n_layers * floor:
        raise InfeasibleBudgetError(
            f"budget {total} is below the window floor {n_layers} x {floor}"
        )
    return apportion(np.ones(n_layers), total, floor, cap)


def pyramid_shares(total, n_layers, beta):
    """Real-valued pyramid budgets, widest at layer 0."""
    if beta < 1:
        raise ConfigError(f"pyramid beta must be >= 1, got {beta}")
    if n_layers == 1:
        return np.array([float(total)])
    top = total / (beta * n_layers)
    bottom = 2.0 * total / n_layers - top
    step = (bottom - top) / (n_layers - 1)
    return bottom - step * np.arange(n_layers)


def pyramid_layer_budgets(total, n_layers, beta, floor=0, cap=None):
    if total < n_layers * floor:
        raise InfeasibleBudgetError(
            f"budget {total} is below the window floor {n_layers} x {floor}"
        )
    return apportion(pyramid_shares(total, n_layers, beta), total, floor, cap)


def cake_spatial(recent):
    """Attention entropy of a layer: mean over heads and window rows.

    ``recent`` is (H, w, N); zero entries contribute nothing.
    """
    a = np.asarray(recent, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, -a * np.log(a), 0.0)
    return float(terms.sum(axis=-1).mean())


def cake_temporal(recent):
    """Attention shift of a layer: per-position variance over the window, summed.

    Averaged over heads.
    """
    a = np.asarray(recent, dtype=np.float64)
    return float(a.var(axis=1).sum(axis=-1).mean())


def cake_preferences(entropies, variances, gamma1, gamma2):
    if gamma1 == 0 or gamma2 == 0:
        raise ConfigError("cake gamma1 and gamma2 must be non-zero")
    h = np.maximum(np.asarray(entropies, dtype=np.float64), CAKE_FLOOR)
    v = np.maximum(np.asarray(variances, dtype=np.float64), CAKE_FLOOR)
    return h ** (1.0 / gamma1) * v ** (1.0 / gamma2)


def cake_layer_budgets(entropies, variances, gamma1, gamma2, total, floor=0, cap=None):
    prefs = cake_preferences(entropies, variances, gamma1, gamma2)
    if total < prefs.size * floor:
        raise InfeasibleBudgetError(f"budget {total} is below the window floor")
    return apportion(prefs, total, floor, cap)


def lava_normalized_scores(s):
    """Scores of a whole layer turned into an eviction distribution."""
    s = np.asarray(s, dtype=np.float64)
    if (s < 0).any():
        raise DomainError("LAVa scores must be non-negative")
    total = s.sum()
    if total <= 0:
        warnings.warn("layer scores sum to zero; using a uniform distribution", RuntimeWarning)
        return np.full(s.shape, 1.0 / s.size)
    return s / total


def lava_layer_entropy(s_hat, n_heads, n_tokens):
    """Entropy of the eviction distribution divided by ``n_heads * n_tokens``."""
    p = np.asarray(s_hat, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum() / (n_heads * n_tokens))


def entropy_layer_budgets(entropies, total, floor=0, cap=None):
    e = np.asarray(entropies, dtype=np.float64)
    if total < e.size * floor:
        raise InfeasibleBudgetError(
            f"budget {total} is below the window floor {e.size} x {floor}"
        )
    if e.sum() <= 0:
        raise DomainError("layer entropies sum to zero")
    return apportion(e, total, floor, cap)


def adakv_head_budgets(head_scores, layer_budget, window):
    """Per-head budgets implied by a layer-wide top-k over all heads' scores.

    The scored quota is ``layer_budget - n_kv_heads * window``; each head's
    budget is its share of the joint top entries plus its window.
    """
    rows = np.asarray(head_scores, dtype=np.float64)
    n_kv, n_scored = rows.shape
    quota = layer_budget - n_kv * window
    if quota < 0 or quota > rows.size:
        raise InfeasibleBudgetError(
            f"layer budget {layer_budget} infeasible for {n_kv} heads x {n_scored} scored + window {window}"
        )
    picked = top_k_indices(rows.ravel(), quota)
    counts = np.bincount(picked // n_scored, minlength=n_kv)
    return [int(c) + window for c in counts]


def uniform_head_budgets(layer_budget, n_kv_heads, window, n_tokens):
    """Equal split of a layer budget across kv-heads (fixed head budgets)."""
    return apportion(np.ones(n_kv_heads), layer_budget, window, n_tokens)
