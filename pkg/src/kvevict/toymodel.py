"""A seeded toy decoder used to measure eviction losses exactly.

The layer update follows the residual-stream bookkeeping the eviction losses
are defined on: ``x_next = y + FFN(y)``, where ``y`` is the multi-head
attention output. There is deliberately no ``x`` residual, no positional
encoding and no normalisation.

Query head ``h`` reads kv-head ``h // (H / H_kv)`` (contiguous GQA groups).
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kvevict.cache import LayerKVCache
from kvevict.errors import ConfigError, DimensionError, StateError
from kvevict.numerics import softmax_row

FFN_EXPANSION = 4


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    n_kv_heads: int
    head_dim: int
    window: int
    vocab: int
    seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "n_kv_heads", "head_dim", "window", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_heads % self.n_kv_heads:
            raise ConfigError(
                f"n_heads={self.n_heads} is not divisible by n_kv_heads={self.n_kv_heads}"
            )
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 unsigned bits")

    @property
    def model_dim(self):
        return self.n_heads * self.head_dim

    @property
    def group_size(self):
        return self.n_heads // self.n_kv_heads

    @property
    def kv_dim(self):
        return self.n_kv_heads * self.head_dim

    @property
    def scale(self):
        return 1.0 / np.sqrt(self.head_dim)


@dataclass
class LayerWeights:
    w_q: np.ndarray  # d x d
    w_k: np.ndarray  # d x (H_kv * d_h)
    w_v: np.ndarray  # d x (H_kv * d_h)
    w_o: np.ndarray  # d x d
    ffn_in: np.ndarray  # d x 4d
    ffn_out: np.ndarray  # 4d x d


@dataclass
class ModelWeights:
    layers: list
    w_m: np.ndarray  # d x vocab


def init_random_model(cfg):
    """Draw every weight i.i.d. from U[-1/sqrt(d), 1/sqrt(d)].

    The generator is numpy's PCG64 seeded with ``cfg.seed``. Draw order is
    fixed: for each layer W_Q, W_K, W_V, W_O, FFN-in, FFN-out, then W_M.
    """
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("init_random_model expects a ModelConfig")
    rng = np.random.default_rng(cfg.seed)
    d = cfg.model_dim
    bound = 1.0 / np.sqrt(d)

    def draw(rows, cols):
        return rng.uniform(-bound, bound, size=(rows, cols))

    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                w_q=draw(d, d),
                w_k=draw(d, cfg.kv_dim),
                w_v=draw(d, cfg.kv_dim),
                w_o=draw(d, d),
                ffn_in=draw(d, FFN_EXPANSION * d),
                ffn_out=draw(FFN_EXPANSION * d, d),
            )
        )
    return ModelWeights(layers=layers, w_m=draw(d, cfg.vocab))


def random_inputs(cfg, n_tokens, scale=1.0):
    """Seeded N(0, scale^2) hidden vectors standing in for token embeddings.

    Uses a stream independent of the weight stream, keyed on ``cfg.seed``.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    return scale * rng.standard_normal((n_tokens, cfg.model_dim))


def attention_step(q, keys, scale):
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    if keys.ndim != 2 or keys.shape[0] == 0:
        raise DimensionError("attention needs a non-empty (N, d_h) key matrix")
    if q.shape != (keys.shape[1],):
        raise DimensionError(f"query {q.shape} does not match keys {keys.shape}")
    return softmax_row((keys @ q) * scale)


def ffn(y, layer):
    return np.maximum(y @ layer.ffn_in, 0.0) @ layer.ffn_out


def attend(queries, keys, values, mask, w_o, scale):
    """Multi-head attention of one query row over a (possibly masked) cache.

    ``queries`` is (H, d_h); ``keys``/``values`` are (H_kv, N, d_h);
    ``mask`` is an (H_kv, N) boolean array or None. Returns the layer
    attention output ``y`` (length d) and the (H, N) attention rows, which
    are zero on evicted positions.
    """
    n_heads, d_h = queries.shape
    n_kv, n_tok, _ = keys.shape
    group = n_heads // n_kv
    rows = np.zeros((n_heads, n_tok))
    heads = np.empty((n_heads, d_h))
    for h in range(n_heads):
        g = h // group
        if mask is None:
            a = attention_step(queries[h], keys[g], scale)
            rows[h] = a
            heads[h] = a @ values[g]
        else:
            keep = np.asarray(mask[g], dtype=bool)
            if not keep.any():
                raise StateError(f"kv-head {g} has no retained entries")
            a = attention_step(queries[h], keys[g][keep], scale)
            rows[h, keep] = a
            heads[h] = a @ values[g][keep]
    return heads.reshape(-1) @ w_o, rows


def _cache_arrays(cache):
    keys = np.stack([cache.keys(h) for h in range(cache.n_kv_heads)])
    values = np.stack([cache.values(h) for h in range(cache.n_kv_heads)])
    return keys, values


def layer_forward(x, cache, layer, cfg):
    """One layer of one stream: returns ``(y, x_next, attention_rows)``.

    The caller must already have appended this stream's key and value.
    """
    x = np.asarray(x, dtype=np.float64)
    if cache.length(0) == 0:
        raise StateError("layer_forward needs a cache holding the current stream")
    q = (x @ layer.w_q).reshape(cfg.n_heads, cfg.head_dim)
    keys, values = _cache_arrays(cache)
    mask = cache.mask()
    y, rows = attend(q, keys, values, None if mask.all() else mask, layer.w_o, cfg.scale)
    return y, y + ffn(y, layer), rows


def forward_logits(y_last, weights):
    """Next-token distribution from the last layer's attention output."""
    last = weights.layers[-1]
    x_out = y_last + ffn(y_last, last)
    return softmax_row(x_out @ weights.w_m)


@dataclass
class LayerState:
    """Everything the eviction engine and the loss metrics need from one layer.

    ``queries`` holds the query rows of the last ``window + 1`` streams,
    oldest first.
    """

    keys: np.ndarray  # (H_kv, N, d_h)
    values: np.ndarray  # (H_kv, N, d_h)
    queries: np.ndarray  # (H, w + 1, d_h)
    weights: LayerWeights

    @property
    def n_tokens(self):
        return self.keys.shape[1]

    def last_query(self):
        return self.queries[:, -1, :]

    def recent_attention(self, window):
        """Attention rows of the last ``window`` streams, shape (H, window, N).

        Row ``r`` belongs to stream ``N - window + r`` and is zero beyond
        that stream's causal horizon.
        """
        n_heads = self.queries.shape[0]
        n_kv, n_tok, d_h = self.keys.shape
        group = n_heads // n_kv
        scale = 1.0 / np.sqrt(d_h)
        out = np.zeros((n_heads, window, n_tok))
        for r in range(window):
            pos = n_tok - window + r
            q_row = self.queries.shape[1] - window + r
            for h in range(n_heads):
                out[h, r, : pos + 1] = attention_step(
                    self.queries[h, q_row], self.keys[h // group, : pos + 1], scale
                )
        return out


@dataclass
class Prefill:
    """Result of prefilling a prompt, in a form shared by synthetic and trace runs."""

    config: ModelConfig
    layers: list
    w_m: np.ndarray
    hidden: Optional[np.ndarray] = None  # (N, L + 1, d), synthetic mode only
    recorded_attention: Optional[list] = None  # per layer (H, w, N)
    full_attention: Optional[list] = None  # per layer (H, N, N), diagnostic mode
    caches: list = field(default_factory=list)

    @property
    def n_tokens(self):
        return self.layers[0].n_tokens

    def model_weights(self):
        return ModelWeights(layers=[s.weights for s in self.layers], w_m=self.w_m)


def prefill(cfg, weights, inputs, keep_full_attention=False):
    """Process ``inputs`` (N x d) causally through every layer.

    Each layer's cache ends up with N entries per kv-head. Only the
    attention rows of the last ``w`` streams are kept unless
    ``keep_full_attention`` is set (needed by accumulated-attention scoring).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n_tok = inputs.shape[0]
    if inputs.ndim != 2 or inputs.shape[1] != cfg.model_dim:
        raise DimensionError(f"inputs must be (N, {cfg.model_dim}), got {inputs.shape}")
    if n_tok <= cfg.window:
        raise ConfigError(f"need more than window={cfg.window} tokens, got {n_tok}")

    L, H, w = cfg.n_layers, cfg.n_heads, cfg.window
    caches = [LayerKVCache(cfg.n_kv_heads, cfg.head_dim, w) for _ in range(L)]
    hidden = np.zeros((n_tok, L + 1, cfg.model_dim))
    queries = np.zeros((L, H, w + 1, cfg.head_dim))
    recent = [np.zeros((H, w, n_tok)) for _ in range(L)]
    full = [np.zeros((H, n_tok, n_tok)) for _ in range(L)] if keep_full_attention else None

    for i in range(n_tok):
        x = inputs[i]
        hidden[i, 0] = x
        for l, layer in enumerate(weights.layers):
            ks = (x @ layer.w_k).reshape(cfg.n_kv_heads, cfg.head_dim)
            vs = (x @ layer.w_v).reshape(cfg.n_kv_heads, cfg.head_dim)
            caches[l].append(ks, vs)
            y, x, rows = layer_forward(x, caches[l], layer, cfg)
            hidden[i, l + 1] = x
            if i >= n_tok - (w + 1):
                q = (hidden[i, l] @ layer.w_q).reshape(H, cfg.head_dim)
                queries[l, :, i - (n_tok - w - 1)] = q
            if i >= n_tok - w:
                recent[l][:, i - (n_tok - w), : i + 1] = rows
            if full is not None:
                full[l][:, i, : i + 1] = rows

    layers = []
    for l, layer in enumerate(weights.layers):
        keys = np.stack([caches[l].keys(h) for h in range(cfg.n_kv_heads)])
        values = np.stack([caches[l].values(h) for h in range(cfg.n_kv_heads)])
        layers.append(LayerState(keys, values, queries[l], layer))
    return Prefill(
        config=cfg,
        layers=layers,
        w_m=weights.w_m,
        hidden=hidden,
        recorded_attention=recent,
        full_attention=full,
        caches=caches,
    )


def masked_forward(pre, masks=None):
    """Re-run the last stream through every layer with masked caches.

    Cached keys and values are fixed; each layer's query is recomputed from
    the (possibly perturbed) residual stream entering it. Returns the
    per-layer attention outputs and the next-token distribution.
    """
    cfg = pre.config
    q = pre.layers[0].last_query()
    outputs = []
    for l, state in enumerate(pre.layers):
        mask = None if masks is None else masks[l]
        y, _ = attend(q, state.keys, state.values, mask, state.weights.w_o, cfg.scale)
        outputs.append(y)
        if l + 1 < len(pre.layers):
            x = y + ffn(y, state.weights)
            q = (x @ pre.layers[l + 1].weights.w_q).reshape(cfg.n_heads, cfg.head_dim)
    probs = forward_logits(outputs[-1], pre.model_weights())
    return outputs, probs
