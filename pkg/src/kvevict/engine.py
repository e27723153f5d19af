"""Eviction algorithms and end-to-end compression pipelines.

The pipelines walk the layers in order, as prefilling does: each layer is
scored once from its full cache, its scores are stored in the cache
sidecar, and it is compressed. Policies with dynamic layer budgets
(``lava-entropy`` and ``cake``) re-split the total budget over all layers
seen so far after every new layer and recompress the earlier layers from
their stored scores.
"""

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from kvevict import allocation
from kvevict.cache import BudgetPlan, LayerKVCache, window_mask
from kvevict.errors import ConfigError, InfeasibleBudgetError, StateError
from kvevict.numerics import top_k_indices
from kvevict.scoring import DEFAULT_POOL_KERNEL, POLICIES, layer_scores

HEAD_MODES = ("fixed", "dynamic")

# name -> (scoring, layer allocation, head-budget mode)
BUNDLES = {
    "lava": ("lava", "lava-entropy", "dynamic"),
    "snapkv": ("snapkv", "uniform", "fixed"),
    "ada-snapkv": ("snapkv", "uniform", "dynamic"),
    "pyramidkv": ("snapkv", "pyramid", "fixed"),
    "ada-pyramidkv": ("snapkv", "pyramid", "dynamic"),
    "cake": ("cake", "cake", "fixed"),
    "tova": ("tova", "uniform", "fixed"),
    "h2o": ("h2o", "uniform", "fixed"),
    "vatp": ("vatp", "uniform", "fixed"),
}


@dataclass(frozen=True)
class PolicyConfig:
    scoring: str
    allocation: str
    head_mode: str
    total_budget: int
    window: int
    kernel: Optional[int] = DEFAULT_POOL_KERNEL
    gamma: float = 0.0
    beta: float = 5.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    name: str = ""

    def __post_init__(self):
        if self.scoring not in POLICIES:
            raise ConfigError(f"unknown scoring policy {self.scoring!r}")
        if self.allocation not in allocation.STRATEGIES:
            raise ConfigError(f"unknown allocation strategy {self.allocation!r}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        if self.allocation == "lava-entropy" and self.scoring != "lava":
            raise ConfigError("lava-entropy allocation needs lava scoring")
        if self.window < 1:
            raise ConfigError("window must be >= 1")
        if self.kernel is not None and (self.kernel < 1 or self.kernel % 2 == 0):
            raise ConfigError(f"pooling kernel must be odd and >= 1, got {self.kernel}")
        if self.gamma < 0:
            raise ConfigError("cake gamma must be >= 0")
        if self.beta < 1:
            raise ConfigError("pyramid beta must be >= 1")
        if self.gamma1 == 0 or self.gamma2 == 0:
            raise ConfigError("cake gamma1/gamma2 must be non-zero")

    @property
    def label(self):
        return self.name or f"{self.scoring}/{self.allocation}/{self.head_mode}"


def bundle(name, total_budget, window, **params):
    """PolicyConfig for one of the named policy bundles in :data:`BUNDLES`."""
    try:
        scoring, alloc, head_mode = BUNDLES[name]
    except KeyError:
        raise ConfigError(f"unknown policy {name!r}; expected one of {sorted(BUNDLES)}") from None
    return PolicyConfig(scoring, alloc, head_mode, int(total_budget), int(window), name=name, **params)


def _scored_width(cache):
    return cache.n_tokens - min(cache.window, cache.n_tokens)


def _candidates(cache, scores):
    """Scores with evicted entries pushed to -inf, plus the count still available."""
    n_scored = _scored_width(cache)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (cache.n_kv_heads, n_scored):
        raise StateError(
            f"scores of shape {scores.shape} do not cover the {n_scored} scored positions "
            f"of {cache.n_kv_heads} kv-heads"
        )
    alive = cache.mask()[:, :n_scored]
    cand = np.where(alive & np.isfinite(scores), scores, -np.inf)
    return cand, alive


def layer_evict(cache, scores, budget):
    """Layer-wise eviction: keep the window plus the joint top entries of all heads.

    ``scores`` is (H_kv, N - w). The scored quota ``budget - H_kv * w`` is
    filled by the best entries across every head at once, so head budgets
    come out of the ranking. Returns the mask; the cache is not modified.
    """
    n_kv, n_tok = cache.n_kv_heads, cache.n_tokens
    floor = n_kv * min(cache.window, n_tok)
    cand, alive = _candidates(cache, scores)
    quota = budget - floor
    if quota < 0:
        raise InfeasibleBudgetError(f"layer budget {budget} is below the window floor {floor}")
    if quota > int(np.isfinite(cand).sum()):
        raise InfeasibleBudgetError(
            f"layer budget {budget} exceeds the {floor + int(alive.sum())} retained entries"
        )
    mask = window_mask(n_kv, n_tok, cache.window)
    scored = mask[:, : cand.shape[1]]
    scored.flat[top_k_indices(cand.ravel(), quota)] = True
    return mask


def head_evict(cache, scores, head_budgets):
    """Per-head eviction with fixed budgets: each head keeps its own top entries."""
    n_kv, n_tok = cache.n_kv_heads, cache.n_tokens
    w = min(cache.window, n_tok)
    cand, _ = _candidates(cache, scores)
    if len(head_budgets) != n_kv:
        raise ConfigError(f"{len(head_budgets)} head budgets for {n_kv} kv-heads")
    mask = window_mask(n_kv, n_tok, cache.window)
    for h, b in enumerate(head_budgets):
        quota = b - w
        if quota < 0:
            raise InfeasibleBudgetError(f"head {h} budget {b} is below the window {w}")
        if quota > int(np.isfinite(cand[h]).sum()):
            raise InfeasibleBudgetError(f"head {h} budget {b} exceeds its retained entries")
        mask[h, top_k_indices(cand[h], quota)] = True
    return mask


def score_layer(state, cfg, full_attention=None):
    """Pooled, GQA-reduced scores of a prefilled layer: (H_kv, N - w)."""
    recent = state.recent_attention(cfg.window)
    return layer_scores(
        cfg.scoring,
        recent,
        state.values,
        cfg.window,
        full_attention=full_attention,
        gamma=cfg.gamma,
        kernel=cfg.kernel,
    )


def layer_mask(cache, scores, cfg, layer_budget):
    """Mask for one layer under ``cfg``'s head-budget mode."""
    if cfg.head_mode == "dynamic":
        return layer_evict(cache, scores, layer_budget)
    head_budgets = allocation.uniform_head_budgets(
        layer_budget, cache.n_kv_heads, min(cache.window, cache.n_tokens), cache.n_tokens
    )
    return head_evict(cache, scores, head_budgets)


def compress_layer(cache, scores, cfg, layer_budget):
    """Evict ``cache`` down to ``layer_budget`` entries in place; returns the mask."""
    mask = layer_mask(cache, scores, cfg, layer_budget)
    cache.apply_mask(mask)
    return mask


def stored_scores(cache):
    """Scores held in the cache sidecar over the scored positions (NaN if evicted)."""
    n_scored = _scored_width(cache)
    return np.stack([cache.scores(h)[:n_scored] for h in range(cache.n_kv_heads)])


def layer_entropy(scores, n_tokens):
    """Normalised entropy of a layer's eviction distribution."""
    s_hat = allocation.lava_normalized_scores(scores)
    return allocation.lava_layer_entropy(s_hat, scores.shape[0], n_tokens)


@dataclass
class CompressionResult:
    config: PolicyConfig
    caches: list
    plan: BudgetPlan
    scores: list  # per layer (H_kv, N - w), as computed at prefill
    entropies: list  # normalised entropy of each layer's scores
    preferences: list  # CAKE layer preferences (empty for other policies)
    live_counts: list = field(default_factory=list)  # retained entries after every step

    @property
    def masks(self):
        return [c.mask() for c in self.caches]

    @property
    def peak_retained(self):
        return max(self.live_counts) if self.live_counts else 0


def check_total_budget(n_layers, n_kv_heads, n_tokens, window, total):
    floor = n_layers * n_kv_heads * min(window, n_tokens)
    capacity = n_layers * n_kv_heads * n_tokens
    if total < floor:
        raise InfeasibleBudgetError(
            f"budget {total} is below the window floor {floor} (= L x H_kv x w)"
        )
    if total > capacity:
        raise InfeasibleBudgetError(f"budget {total} exceeds the full cache size {capacity}")


def compress(pre, cfg, audit=None):
    """Run ``cfg`` over a prefilled model layer by layer.

    ``audit``, if given, is called as ``audit(event, layer, live)`` after
    every prefill and every (re)compression; ``live`` is the total number of
    retained entries across all layers at that moment.
    """
    n_layers = len(pre.layers)
    n_kv, n_tok, _ = pre.layers[0].keys.shape
    if cfg.window >= n_tok:
        raise ConfigError(f"window {cfg.window} leaves no scored positions in {n_tok} tokens")
    if cfg.window > pre.layers[0].queries.shape[1] - 1:
        raise ConfigError("policy window is wider than the recorded query window")
    total = cfg.total_budget
    check_total_budget(n_layers, n_kv, n_tok, cfg.window, total)
    if cfg.scoring == "h2o" and pre.full_attention is None:
        raise StateError("h2o scoring needs a prefill run with keep_full_attention=True")

    floor = n_kv * cfg.window
    capacity = n_kv * n_tok
    dynamic_layers = cfg.allocation in ("lava-entropy", "cake")
    if cfg.allocation == "uniform":
        static = allocation.uniform_layer_budgets(total, n_layers, floor, capacity)
    elif cfg.allocation == "pyramid":
        static = allocation.pyramid_layer_budgets(total, n_layers, cfg.beta, floor, capacity)
    else:
        static = None

    caches, all_scores, entropies, prefs, rounds, live = [], [], [], [], [], []
    budgets = []

    def record(event, layer):
        count = sum(c.retained_count() for c in caches)
        live.append(count)
        if audit is not None:
            audit(event, layer, count)

    for l, state in enumerate(pre.layers):
        cache = LayerKVCache.from_arrays(state.keys, state.values, cfg.window)
        caches.append(cache)
        record("prefill", l)

        full = None if pre.full_attention is None else pre.full_attention[l]
        scores = score_layer(state, cfg, full_attention=full)
        n_scored = scores.shape[1]
        for h in range(n_kv):
            cache.store_scores(h, range(n_scored), scores[h])
        all_scores.append(scores)
        entropies.append(layer_entropy(scores, n_tok) if scores.size else 0.0)
        if cfg.allocation == "cake":
            recent = state.recent_attention(cfg.window)
            prefs.append(
                float(
                    allocation.cake_preferences(
                        [allocation.cake_spatial(recent)],
                        [allocation.cake_temporal(recent)],
                        cfg.gamma1,
                        cfg.gamma2,
                    )[0]
                )
            )

        if not dynamic_layers:
            budgets.append(static[l])
            compress_layer(cache, scores, cfg, static[l])
            record("compress", l)
            continue

        weights = entropies if cfg.allocation == "lava-entropy" else prefs
        round_total = min(total, (l + 1) * capacity)
        upper = budgets + [capacity]
        budgets = allocation.apportion(weights, round_total, floor, upper)
        rounds.append(list(budgets))
        for lt in range(l + 1):
            compress_layer(caches[lt], stored_scores(caches[lt]), cfg, budgets[lt])
            record("compress", lt)

    masks = [c.mask() for c in caches]
    plan = BudgetPlan(
        total=total,
        per_layer=[int(m.sum()) for m in masks],
        per_head=[[int(x) for x in m.sum(axis=1)] for m in masks],
        rounds=rounds if dynamic_layers else [list(static)],
    )
    plan.validate(n_kv, cfg.window)
    return CompressionResult(cfg, caches, plan, all_scores, entropies, prefs, live)


def lava_pipeline(pre, total_budget, window, kernel=DEFAULT_POOL_KERNEL, audit=None):
    """Dynamic layer and head budgets from LAVa scores, with recompression."""
    from kvevict.metrics import evaluate

    cfg = bundle("lava", total_budget, window, kernel=kernel)
    result = compress(pre, cfg, audit=audit)
    return result.caches, result.plan, evaluate(pre, result)


def baseline_pipeline(pre, cfg, audit=None):
    from kvevict.metrics import evaluate

    result = compress(pre, cfg, audit=audit)
    return result.caches, result.plan, evaluate(pre, result)


def one_shot(pre, cfg, layer_budgets):
    """Compress every layer once, from its full cache, to the given budgets."""
    masks = []
    for l, state in enumerate(pre.layers):
        cache = LayerKVCache.from_arrays(state.keys, state.values, cfg.window)
        full = None if pre.full_attention is None else pre.full_attention[l]
        scores = score_layer(state, cfg, full_attention=full)
        masks.append(layer_mask(cache, scores, cfg, layer_budgets[l]))
    return masks


def with_budget(cfg, total_budget):
    return replace(cfg, total_budget=int(total_budget))
