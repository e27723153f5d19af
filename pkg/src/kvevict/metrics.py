"""Information-loss measurements and their upper bounds.

All losses are measured at the last residual stream. Per-layer losses use
the cached keys, values and last query of that layer as prefilled (no
upstream perturbation); the logit loss reruns the whole stack with every
layer masked at once.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from kvevict import kernels
from kvevict.errors import DimensionError, DomainError, FeasibilityError
from kvevict.numerics import cross_entropy, softmax_row
from kvevict.scoring import value_norm_per_head
from kvevict.toymodel import masked_forward

# Largest number of scored candidates the exhaustive oracle will enumerate.
ENUMERATION_CAP = 20


def masked_renormalize(a, mask):
    """Zero the evicted entries of a distribution and rescale it to sum to 1."""
    a = np.asarray(a, dtype=np.float64)
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != a.shape:
        raise DimensionError(f"mask {keep.shape} does not match attention {a.shape}")
    kept = np.where(keep, a, 0.0)
    total = kept.sum()
    if not keep.any() or total <= 0:
        raise DomainError("the mask leaves no attention mass to renormalise")
    if keep.all():
        return a.copy()
    return kept / total


def _per_query_head(mask, n_heads):
    mask = np.asarray(mask, dtype=bool)
    return np.repeat(mask, n_heads // mask.shape[0], axis=0)


def head_attention(keys, query, scale=None):
    """Unmasked attention rows of one stream: (H, N) from (H_kv, N, d_h) keys."""
    n_heads, d_h = query.shape
    group = n_heads // keys.shape[0]
    scale = 1.0 / np.sqrt(d_h) if scale is None else scale
    return np.stack(
        [softmax_row(keys[h // group] @ query[h] * scale) for h in range(n_heads)]
    )


def layer_output_loss(keys, values, query, w_o, mask):
    """L1 distance between the layer attention output with and without eviction.

    ``keys``/``values`` are the full (H_kv, N, d_h) cache, ``query`` the
    (H, d_h) query of the last stream and ``mask`` the (H_kv, N) retained
    flags. The evicted output renormalises each head's attention row over
    the retained entries.
    """
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    n_heads = query.shape[0]
    group = n_heads // keys.shape[0]
    attn = head_attention(keys, query)
    keep = _per_query_head(mask, n_heads)
    diff = np.empty_like(query)
    for h in range(n_heads):
        a_hat = masked_renormalize(attn[h], keep[h])
        diff[h] = (attn[h] - a_hat) @ values[h // group]
    return float(np.abs(diff.reshape(-1) @ w_o).sum())


def c_hat(w_o):
    """Induced 1-norm of ``W_O`` transposed: its largest row absolute sum."""
    return float(np.abs(np.asarray(w_o, dtype=np.float64)).sum(axis=1).max())


def evicted_mass(attn, mask):
    """Per query head, the attention mass falling on evicted entries."""
    attn = np.asarray(attn, dtype=np.float64)
    keep = _per_query_head(mask, attn.shape[0])
    return np.where(keep, 0.0, attn).sum(axis=1)


def theorem1_bound(attn, vbar, w_o, mask):
    """``2 * c_hat(W_O) * sum_h vbar_h * (evicted attention mass of head h)``."""
    vbar = np.asarray(vbar, dtype=np.float64)
    return float(2.0 * c_hat(w_o) * (evicted_mass(attn, mask) * vbar).sum())


def adakv_constant(values, w_o, n_heads):
    """Largest L1 norm of any value vector mapped through its head's W_O block."""
    values = np.asarray(values, dtype=np.float64)
    w_o = np.asarray(w_o, dtype=np.float64)
    n_kv, _, d_h = values.shape
    group = n_heads // n_kv
    best = 0.0
    for h in range(n_heads):
        block = w_o[h * d_h : (h + 1) * d_h]
        best = max(best, float(np.abs(values[h // group] @ block).sum(axis=1).max()))
    return best


def adakv_bound(attn, w_o, values, mask):
    """``2 * C * total evicted attention mass``, C from :func:`adakv_constant`."""
    attn = np.asarray(attn, dtype=np.float64)
    c = adakv_constant(values, w_o, attn.shape[0])
    return float(2.0 * c * evicted_mass(attn, mask).sum())


def layer_bounds(state, mask):
    """(true loss, Theorem-1 bound, AdaKV bound) of one layer under ``mask``."""
    query = state.last_query()
    attn = head_attention(state.keys, query)
    vbar = value_norm_per_head(state.values, query.shape[0])
    w_o = state.weights.w_o
    return (
        layer_output_loss(state.keys, state.values, query, w_o, mask),
        theorem1_bound(attn, vbar, w_o, mask),
        adakv_bound(attn, w_o, state.values, mask),
    )


def logit_loss(pre, masks):
    """Cross-entropy between next-token distributions with full and masked caches."""
    _, p_full = masked_forward(pre, None)
    _, p_masked = masked_forward(pre, masks)
    return max(0.0, cross_entropy(p_full, p_masked) - cross_entropy(p_full, p_full))


def _candidates(n_kv, n_tok, window, base_mask):
    base = np.ones((n_kv, n_tok), dtype=bool) if base_mask is None else np.asarray(base_mask, bool)
    scored = np.zeros_like(base)
    scored[:, : n_tok - window] = True
    cand_head, cand_pos = np.nonzero(scored & base)
    return base & ~scored, cand_head.astype(np.intp), cand_pos.astype(np.intp)


def _exhaustive_setup(n_kv, n_tok, window, budget, base_mask):
    if window >= n_tok:
        raise FeasibilityError("window leaves no scored positions")
    fixed, cand_head, cand_pos = _candidates(n_kv, n_tok, window, base_mask)
    if cand_head.size > ENUMERATION_CAP:
        raise FeasibilityError(
            f"{cand_head.size} scored candidates exceed the enumeration cap of {ENUMERATION_CAP}"
        )
    keep = budget - int(fixed.sum())
    if keep < 0 or keep > cand_head.size:
        raise FeasibilityError(
            f"budget {budget} not reachable: window holds {int(fixed.sum())}, "
            f"{cand_head.size} scored candidates"
        )
    return fixed, cand_head, cand_pos, keep


def _combo_mask(fixed, cand_head, cand_pos, combo):
    mask = fixed.copy()
    mask[cand_head[combo], cand_pos[combo]] = True
    return mask


def oracle_exhaustive_evict(state, budget, window, base_mask=None):
    """True-loss minimiser over every window-respecting mask with ``budget`` entries.

    Masks are enumerated as lexicographic combinations of the scored
    candidates (head-major order); the first minimum wins. ``base_mask``
    restricts candidates to already retained entries.
    """
    n_kv, n_tok, _ = state.keys.shape
    fixed, cand_head, cand_pos, keep = _exhaustive_setup(n_kv, n_tok, window, budget, base_mask)
    query = state.last_query()
    if keep == cand_head.size:
        mask = _combo_mask(fixed, cand_head, cand_pos, np.arange(keep))
        return mask, layer_output_loss(state.keys, state.values, query, state.weights.w_o, mask)
    attn = head_attention(state.keys, query)
    group = query.shape[0] // n_kv
    per_head_values = np.repeat(state.values, group, axis=0)
    loss, combo = kernels.enumerate_min_loss(
        attn, per_head_values, state.weights.w_o, fixed, cand_head, cand_pos, keep, group
    )
    return _combo_mask(fixed, cand_head, cand_pos, combo), float(loss)


def exhaustive_bound_min(attn, vbar, w_o, n_kv, window, budget, base_mask=None):
    """Minimum of the Theorem-1 bound over window-respecting masks of ``budget`` entries."""
    attn = np.asarray(attn, dtype=np.float64)
    n_heads, n_tok = attn.shape
    fixed, cand_head, cand_pos, keep = _exhaustive_setup(n_kv, n_tok, window, budget, base_mask)
    raw, combo = kernels.enumerate_min_bound(
        attn, np.asarray(vbar, dtype=np.float64), fixed, cand_head, cand_pos, keep, n_heads // n_kv
    )
    return _combo_mask(fixed, cand_head, cand_pos, combo), float(2.0 * c_hat(w_o) * raw)


@dataclass
class LossReport:
    policy: str
    total_budget: int
    seed: int
    layer_budgets: list = field(default_factory=list)
    retained: list = field(default_factory=list)
    true_l1_loss: list = field(default_factory=list)
    theorem1_bound: list = field(default_factory=list)
    adakv_bound: list = field(default_factory=list)
    entropy_e: list = field(default_factory=list)
    logit_ce: float = 0.0

    def validate(self, slack=1e-9):
        for l, (loss, bound) in enumerate(zip(self.true_l1_loss, self.theorem1_bound)):
            if min(loss, bound) < 0 or loss > bound * (1 + slack) + 1e-12:
                return f"layer {l}: loss {loss!r} exceeds bound {bound!r}"
        if self.logit_ce < 0:
            return "negative logit loss"
        return None

    def to_dict(self):
        return asdict(self)


def evaluate(pre, result):
    """LossReport for a finished :class:`~kvevict.engine.CompressionResult`."""
    masks = result.masks
    report = LossReport(
        policy=result.config.label,
        total_budget=result.config.total_budget,
        seed=pre.config.seed,
        layer_budgets=list(result.plan.per_layer),
        retained=[c.retained_count() for c in result.caches],
        entropy_e=[float(e) for e in result.entropies],
    )
    for state, mask in zip(pre.layers, masks):
        loss, t1, ada = layer_bounds(state, mask)
        report.true_l1_loss.append(loss)
        report.theorem1_bound.append(t1)
        report.adakv_bound.append(ada)
    report.logit_ce = logit_loss(pre, masks)
    return report
