import numpy as np
import pytest
from conftest import make_prefill
from hypothesis import given
from hypothesis import strategies as st

from kvevict.errors import ConfigError, DimensionError, StateError
from kvevict.toymodel import (
    ModelConfig,
    attend,
    ffn,
    init_random_model,
    masked_forward,
    prefill,
    random_inputs,
)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(1, 3, 2, 4, 2, 8)
    with pytest.raises(ConfigError):
        ModelConfig(0, 2, 2, 4, 2, 8)
    cfg = ModelConfig(2, 4, 2, 8, 3, 10)
    assert (cfg.model_dim, cfg.group_size, cfg.kv_dim) == (32, 2, 16)


def test_weights_are_seeded_and_bounded():
    cfg = ModelConfig(2, 2, 1, 4, 2, 5, seed=9)
    a, b = init_random_model(cfg), init_random_model(cfg)
    c = init_random_model(ModelConfig(2, 2, 1, 4, 2, 5, seed=10))
    assert np.array_equal(a.layers[1].ffn_out, b.layers[1].ffn_out)
    assert not np.array_equal(a.w_m, c.w_m)
    bound = 1 / np.sqrt(cfg.model_dim)
    for w in (a.layers[0].w_q, a.layers[0].w_k, a.layers[1].ffn_in, a.w_m):
        assert np.abs(w).max() <= bound
    assert a.layers[0].w_k.shape == (8, 4)
    assert a.layers[0].ffn_in.shape == (8, 32)


def loop_attention(q, keys, values, mask, w_o, scale):
    """Straight-line multi-head attention with explicit GQA indexing."""
    n_heads, d_h = q.shape
    n_kv = keys.shape[0]
    out = []
    for h in range(n_heads):
        g = h * n_kv // n_heads
        logits = [
            float(keys[g, i] @ q[h]) * scale if mask is None or mask[g, i] else -np.inf
            for i in range(keys.shape[1])
        ]
        m = max(logits)
        e = [np.exp(x - m) for x in logits]
        z = sum(e)
        out.append(sum((e[i] / z) * values[g, i] for i in range(keys.shape[1])))
    return np.concatenate(out) @ w_o


@given(st.integers(0, 2**31), st.sampled_from([(4, 2), (4, 4), (4, 1), (2, 1)]))
def test_attend_matches_loop_oracle(seed, heads):
    n_heads, n_kv = heads
    rng = np.random.default_rng(seed)
    d_h, n_tok = 3, 7
    q = rng.normal(size=(n_heads, d_h))
    keys = rng.normal(size=(n_kv, n_tok, d_h))
    values = rng.normal(size=(n_kv, n_tok, d_h))
    w_o = rng.normal(size=(n_heads * d_h, 5))
    mask = rng.random((n_kv, n_tok)) < 0.6
    mask[:, -1] = True
    y, rows = attend(q, keys, values, mask, w_o, 0.5)
    assert np.allclose(y, loop_attention(q, keys, values, mask, w_o, 0.5), atol=1e-12)
    assert np.allclose(rows.sum(axis=1), 1.0)
    assert (rows[np.repeat(~mask, n_heads // n_kv, axis=0)] == 0).all()


def test_attend_rejects_fully_masked_head():
    with pytest.raises(StateError):
        attend(np.ones((1, 2)), np.ones((1, 3, 2)), np.ones((1, 3, 2)), np.zeros((1, 3), bool), np.eye(2), 1.0)


def test_prefill_records_consistent_state():
    pre = make_prefill(full=True)
    cfg = pre.config
    w = cfg.window
    for l, state in enumerate(pre.layers):
        assert state.keys.shape == (2, 16, 4)
        assert state.queries.shape == (4, w + 1, 4)
        recent = state.recent_attention(w)
        assert np.allclose(recent, pre.recorded_attention[l], atol=1e-14)
        assert np.allclose(pre.full_attention[l][:, -w:], recent, atol=1e-14)
        # causal: nothing beyond the diagonal
        assert np.allclose(np.triu(pre.full_attention[l][0], 1), 0.0)
    x0 = random_inputs(cfg, 16)[-1]
    assert np.allclose(pre.layers[0].last_query().reshape(-1), x0 @ pre.layers[0].weights.w_q)


def test_layer_update_has_no_input_residual():
    pre = make_prefill()
    outputs, _ = masked_forward(pre)
    for l, (state, y) in enumerate(zip(pre.layers, outputs)):
        assert np.allclose(pre.hidden[-1, l + 1], y + ffn(y, state.weights), atol=1e-12)


def test_unmasked_forward_reproduces_last_queries():
    pre = make_prefill(layers=3)
    cfg = pre.config
    outputs, _ = masked_forward(pre)
    for l in range(1, 3):
        x = pre.hidden[-1, l]
        q = (x @ pre.layers[l].weights.w_q).reshape(cfg.n_heads, cfg.head_dim)
        assert np.allclose(q, pre.layers[l].last_query(), atol=1e-12)


def test_prefill_needs_more_tokens_than_window():
    cfg = ModelConfig(1, 2, 1, 2, 4, 3)
    with pytest.raises(ConfigError):
        prefill(cfg, init_random_model(cfg), random_inputs(cfg, 4))
    with pytest.raises(DimensionError):
        prefill(cfg, init_random_model(cfg), np.zeros((6, 3)))


def test_prefill_is_deterministic():
    a, b = make_prefill(seed=5), make_prefill(seed=5)
    for sa, sb in zip(a.layers, b.layers):
        assert np.array_equal(sa.keys, sb.keys) and np.array_equal(sa.queries, sb.queries)


from kvevict.cache import LayerKVCache
from kvevict.scoring import layer_scores
from kvevict.toymodel import LayerWeights, ModelWeights, attention_step, forward_logits, layer_forward


def test_attention_step_examples():
    assert np.allclose(attention_step(np.zeros(3), np.ones((4, 3)), 1.0), 0.25)
    assert np.array_equal(attention_step(np.ones(2), np.ones((1, 2)), 1.0), [1.0])


def zero_layer(d, d_kv):
    z = lambda r, c: np.zeros((r, c))
    return LayerWeights(z(d, d), z(d, d_kv), z(d, d_kv), z(d, d), z(d, 4 * d), z(4 * d, d))


def test_layer_forward_examples():
    cfg = ModelConfig(1, 2, 1, 2, 1, 3)
    cache = LayerKVCache(1, 2, 1)
    cache.append(np.ones((1, 2)), np.ones((1, 2)))
    y, x_next, _ = layer_forward(np.ones(4), cache, zero_layer(4, 2), cfg)
    assert not y.any() and not x_next.any()
    with pytest.raises(StateError):
        layer_forward(np.ones(4), LayerKVCache(1, 2, 1), zero_layer(4, 2), cfg)

    cfg = ModelConfig(1, 1, 1, 2, 1, 3)
    rng = np.random.default_rng(0)
    layer = LayerWeights(*(rng.normal(size=s) for s in [(2, 2), (2, 2), (2, 2), (2, 2), (2, 8), (8, 2)]))
    cache = LayerKVCache(1, 2, 1)
    v = np.array([0.7, -1.2])
    cache.append(rng.normal(size=(1, 2)), v[None])
    y, _, rows = layer_forward(rng.normal(size=2), cache, layer, cfg)
    assert np.allclose(y, v @ layer.w_o) and rows.tolist() == [[1.0]]


def test_forward_logits_examples():
    layer = zero_layer(4, 2)
    assert np.allclose(forward_logits(np.ones(4), ModelWeights([layer], np.zeros((4, 5)))), 0.2)
    assert forward_logits(np.ones(4), ModelWeights([layer], np.ones((4, 1)))).tolist() == [1.0]


def test_uniform_draws_are_centred():
    cfg = ModelConfig(1, 1, 1, 100, 1, 100, seed=1)
    w = init_random_model(cfg).layers[0].w_q.ravel()  # 10^4 draws
    d = cfg.model_dim
    assert abs(w.mean()) < 3 / (np.sqrt(w.size) * np.sqrt(3) * np.sqrt(d))


def test_minimal_sequence_has_one_scored_position():
    pre = make_prefill(layers=1, tokens=4, window=3)
    state = pre.layers[0]
    scores = layer_scores("snapkv", state.recent_attention(3), state.values, 3)
    assert scores.shape == (2, 1)


def test_prefill_matches_all_at_once_oracle():
    cfg = ModelConfig(2, 2, 2, 3, 2, 4, seed=12)
    weights = init_random_model(cfg)
    x = random_inputs(cfg, 8)
    pre = prefill(cfg, weights, x)
    causal = np.tril(np.ones((8, 8), dtype=bool))
    for l, layer in enumerate(weights.layers):
        split = lambda m: m.reshape(8, 2, 3).transpose(1, 0, 2)
        q, k, v = split(x @ layer.w_q), split(x @ layer.w_k), split(x @ layer.w_v)
        logits = np.einsum("hid,hjd->hij", q, k) * cfg.scale
        logits = np.where(causal, logits, -np.inf)
        attn = np.exp(logits - logits.max(axis=2, keepdims=True))
        attn /= attn.sum(axis=2, keepdims=True)
        heads = np.einsum("hij,hjd->ihd", attn, v).reshape(8, 6)
        y = heads @ layer.w_o
        assert np.allclose(pre.layers[l].keys, k, atol=1e-12)
        assert np.allclose(pre.recorded_attention[l], attn[:, -2:], atol=1e-12)
        x = y + ffn(y, layer)
        assert np.allclose(pre.hidden[:, l + 1], x, atol=1e-10)
