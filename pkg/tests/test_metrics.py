import numpy as np
import pytest
from conftest import make_prefill
from hypothesis import given
from hypothesis import strategies as st

from kvevict import engine, metrics
from kvevict.cache import LayerKVCache, window_mask
from kvevict.errors import DomainError, FeasibilityError
from kvevict.numerics import softmax_row
from kvevict.scoring import value_norm_per_head
from kvevict.toymodel import LayerState, LayerWeights, ModelConfig, Prefill, init_random_model


def test_masked_renormalize_examples():
    assert np.allclose(metrics.masked_renormalize([0.2, 0.3, 0.5], [1, 0, 1]), [2 / 7, 0, 5 / 7])
    a = np.array([0.1, 0.9])
    assert np.array_equal(metrics.masked_renormalize(a, [1, 1]), a)
    with pytest.raises(DomainError):
        metrics.masked_renormalize(a, [0, 0])


@given(st.integers(0, 2**31), st.integers(2, 40))
def test_masked_renormalize_is_masked_softmax(seed, n):
    rng = np.random.default_rng(seed)
    logits = rng.normal(scale=3, size=n)
    mask = rng.random(n) < 0.5
    mask[rng.integers(n)] = True
    direct = softmax_row(np.where(mask, logits, -np.inf))
    assert np.abs(metrics.masked_renormalize(softmax_row(logits), mask) - direct).max() <= 1e-12


def random_state(rng, n_heads=2, n_kv=1, n_tok=6, d_h=3, window=1):
    d = n_heads * d_h
    weights = LayerWeights(
        w_q=np.zeros((d, d)),
        w_k=np.zeros((d, n_kv * d_h)),
        w_v=np.zeros((d, n_kv * d_h)),
        w_o=rng.normal(size=(d, d)),
        ffn_in=np.zeros((d, 4 * d)),
        ffn_out=np.zeros((4 * d, d)),
    )
    return LayerState(
        keys=rng.normal(size=(n_kv, n_tok, d_h)),
        values=rng.normal(size=(n_kv, n_tok, d_h)),
        queries=rng.normal(size=(n_heads, window + 1, d_h)),
        weights=weights,
    )


def straight_line_loss(state, mask):
    q = state.last_query()
    n_heads, d_h = q.shape
    n_kv = state.keys.shape[0]
    full, cut = [], []
    for h in range(n_heads):
        g = h // (n_heads // n_kv)
        logits = state.keys[g] @ q[h] / np.sqrt(d_h)
        full.append(softmax_row(logits) @ state.values[g])
        cut.append(softmax_row(np.where(mask[g], logits, -np.inf)) @ state.values[g])
    w_o = state.weights.w_o
    return np.abs(np.concatenate(full) @ w_o - np.concatenate(cut) @ w_o).sum()


@given(st.integers(0, 2**31))
def test_layer_output_loss_matches_straight_line(seed):
    rng = np.random.default_rng(seed)
    state = random_state(rng, n_heads=4, n_kv=2)
    mask = (rng.random((2, 6)) < 0.5) | window_mask(2, 6, 1)
    got = metrics.layer_output_loss(state.keys, state.values, state.last_query(), state.weights.w_o, mask)
    assert got == pytest.approx(straight_line_loss(state, mask), rel=1e-10, abs=1e-12)


def test_layer_output_loss_trivial_cases():
    rng = np.random.default_rng(0)
    state = random_state(rng)
    args = (state.keys, state.values, state.last_query(), state.weights.w_o)
    assert metrics.layer_output_loss(*args, np.ones((1, 6), bool)) == 0.0
    # a position the query gives no weight to costs nothing
    keys = np.array([[[50.0], [-50.0]]])
    values = np.array([[[1.0], [7.0]]])
    q = np.array([[1.0]])
    assert metrics.layer_output_loss(keys, values, q, np.eye(1), np.array([[True, False]])) < 1e-40


def test_theorem1_bound_arithmetic():
    attn = np.array([[0.5, 0.5]])
    mask = np.array([[False, True]])
    w_o = np.eye(2)[:1] * 1.0  # 1 x 2, row abs-sum 1
    assert metrics.theorem1_bound(attn, [2.0], w_o, mask) == 2.0
    assert metrics.theorem1_bound(attn, [2.0], w_o, np.ones((1, 2), bool)) == 0.0
    assert metrics.c_hat([[1.0, -2.0], [0.5, 0.5]]) == 3.0


def test_adakv_bound_single_head():
    values = np.array([[[1.0, 0.0], [0.0, 2.0]]])
    w_o = np.array([[1.0, 1.0], [0.5, -0.5]])
    c = metrics.adakv_constant(values, w_o, 1)
    assert c == max(np.abs(values[0] @ w_o).sum(axis=1))
    attn = np.array([[0.25, 0.75]])
    assert metrics.adakv_bound(attn, w_o, values, np.array([[False, True]])) == pytest.approx(2 * c * 0.25)
    assert metrics.adakv_bound(attn, w_o, values, np.ones((1, 2), bool)) == 0.0


@given(st.integers(0, 2**31), st.sampled_from([(1, 1), (2, 1), (4, 2), (4, 4)]))
def test_both_bounds_hold(seed, heads):
    rng = np.random.default_rng(seed)
    state = random_state(rng, n_heads=heads[0], n_kv=heads[1], n_tok=8)
    mask = (rng.random((heads[1], 8)) < 0.4) | window_mask(heads[1], 8, 1)
    loss, t1, ada = metrics.layer_bounds(state, mask)
    assert loss <= t1 * (1 + 1e-9) + 1e-12
    assert loss <= ada * (1 + 1e-9) + 1e-12


def test_logit_loss_trivial_cases():
    pre = make_prefill()
    assert metrics.logit_loss(pre, [np.ones((2, 16), bool)] * 2) <= 1e-10
    cfg = ModelConfig(2, 2, 1, 2, 2, 1, seed=3)
    from kvevict.toymodel import prefill, random_inputs

    tiny = prefill(cfg, init_random_model(cfg), random_inputs(cfg, 6))
    masks = [window_mask(1, 6, 2)] * 2
    assert metrics.logit_loss(tiny, masks) == 0.0


def rebuilt_logit_loss(pre, masks):
    """Rerun the last stream over physically compacted caches."""
    cfg = pre.config
    q = pre.layers[0].last_query()
    ys = []
    for l, (state, mask) in enumerate(zip(pre.layers, masks)):
        heads = []
        for h in range(cfg.n_heads):
            g = h // cfg.group_size
            k = state.keys[g][mask[g]]
            v = state.values[g][mask[g]]
            heads.append(softmax_row(k @ q[h] * cfg.scale) @ v)
        y = np.concatenate(heads) @ state.weights.w_o
        ys.append(y)
        x = y + np.maximum(y @ state.weights.ffn_in, 0) @ state.weights.ffn_out
        if l + 1 < len(pre.layers):
            q = (x @ pre.layers[l + 1].weights.w_q).reshape(cfg.n_heads, cfg.head_dim)
    p_hat = softmax_row(x @ pre.w_m)
    p = softmax_row(pre.hidden[-1, -1] @ pre.w_m)
    return float((p * (np.log(p) - np.log(p_hat))).sum())


@given(st.integers(0, 10**6))
def test_logit_loss_matches_rebuild_oracle(seed):
    pre = make_prefill(seed=seed, scale=3.0)
    rng = np.random.default_rng(seed)
    masks = [(rng.random((2, 16)) < 0.4) | window_mask(2, 16, 3) for _ in range(2)]
    assert metrics.logit_loss(pre, masks) == pytest.approx(rebuilt_logit_loss(pre, masks), rel=1e-6, abs=1e-11)


def test_oracle_trivial_cases():
    rng = np.random.default_rng(1)
    state = random_state(rng, n_heads=2, n_kv=2, n_tok=5, window=2)
    mask, loss = metrics.oracle_exhaustive_evict(state, 10, 2)
    assert mask.all() and loss == pytest.approx(0.0, abs=1e-12)
    # a single scored entry forced out
    state = random_state(rng, n_heads=1, n_kv=1, n_tok=3, window=2)
    mask, loss = metrics.oracle_exhaustive_evict(state, 2, 2)
    assert mask.tolist() == [[False, True, True]]
    expect = metrics.layer_output_loss(state.keys, state.values, state.last_query(), state.weights.w_o, mask)
    assert loss == pytest.approx(expect, rel=1e-12)


def test_oracle_rejects_large_instances():
    rng = np.random.default_rng(1)
    state = random_state(rng, n_heads=2, n_kv=2, n_tok=13, window=2)
    with pytest.raises(FeasibilityError):
        metrics.oracle_exhaustive_evict(state, 10, 2)
    small = random_state(rng, n_heads=2, n_kv=2, n_tok=5, window=2)
    with pytest.raises(FeasibilityError):
        metrics.oracle_exhaustive_evict(small, 3, 2)


@given(st.integers(0, 2**31), st.data())
def test_oracle_sandwich_and_monotonicity(seed, data):
    rng = np.random.default_rng(seed)
    state = random_state(rng, n_heads=4, n_kv=2, n_tok=7, window=2)
    budget = data.draw(st.integers(4, 13))
    _, best = metrics.oracle_exhaustive_evict(state, budget, 2)
    cache = LayerKVCache.from_arrays(state.keys, state.values, 2)
    attn = metrics.head_attention(state.keys, state.last_query())
    vbar = value_norm_per_head(state.values, 4)
    scores = np.maximum(attn[0::2] * vbar[0::2, None], attn[1::2] * vbar[1::2, None])[:, :5]
    greedy = engine.layer_evict(cache, scores, budget)
    loss, bound, _ = metrics.layer_bounds(state, greedy)
    assert best <= loss * (1 + 1e-9) + 1e-12 and loss <= bound * (1 + 1e-9) + 1e-12


@given(st.integers(0, 2**31), st.integers(4, 13))
def test_bound_minimum_shrinks_with_budget(seed, budget):
    rng = np.random.default_rng(seed)
    attn = rng.dirichlet(np.ones(7), size=4)
    vbar = rng.uniform(0.5, 2.0, size=4)
    w_o = rng.normal(size=(4, 4))
    _, small = metrics.exhaustive_bound_min(attn, vbar, w_o, 2, 2, budget)
    _, large = metrics.exhaustive_bound_min(attn, vbar, w_o, 2, 2, budget + 1)
    assert large <= small * (1 + 1e-12)


def test_true_loss_minimum_is_not_monotone_in_budget():
    # Keeping one more entry can undo a cancellation between evicted ones.
    state = random_state(np.random.default_rng(9), n_heads=4, n_kv=2, n_tok=7, window=2)
    _, at9 = metrics.oracle_exhaustive_evict(state, 9, 2)
    _, at10 = metrics.oracle_exhaustive_evict(state, 10, 2)
    assert at9 == pytest.approx(1.7813591471421584, rel=1e-9)
    assert at10 == pytest.approx(2.0807470111822486, rel=1e-9)


def test_exhaustive_bound_min_is_minimum():
    rng = np.random.default_rng(4)
    attn = rng.dirichlet(np.ones(6), size=2)
    vbar = np.array([1.0, 3.0])
    w_o = rng.normal(size=(4, 4))
    mask, value = metrics.exhaustive_bound_min(attn, vbar, w_o, 2, 2, 6)
    assert value == pytest.approx(metrics.theorem1_bound(attn, vbar, w_o, mask), rel=1e-12)
    assert mask.sum() == 6


def test_evaluate_report_shapes():
    pre = make_prefill()
    result = engine.compress(pre, engine.bundle("snapkv", 30, 3))
    report = metrics.evaluate(pre, result)
    assert report.layer_budgets == [15, 15] and report.retained == [15, 15]
    assert report.validate() is None
    assert report.to_dict()["policy"] == "snapkv"
    assert report.logit_ce >= 0
