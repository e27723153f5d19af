"""Binary trace files holding a prefilled toy model for offline evaluation.

Layout, all little-endian::

    b"KVT1"
    u32 version, L, H, H_kv, d_h, N, w, vocab
    u64 seed
    per layer: K [H_kv, N, d_h], V [H_kv, N, d_h], Q [H, w+1, d_h], W_O [d, d]
    W_M [d, vocab]
    per layer: FFN-in [d, 4d], FFN-out [4d, d]
    per layer: W_Q [d, d]

Arrays are float32 in C order. The trailing W_Q block lets the loader
recompute queries from a perturbed residual stream when measuring the
logit loss.
"""

import struct

import numpy as np

from kvevict.errors import KVEvictError
from kvevict.toymodel import FFN_EXPANSION, LayerState, LayerWeights, ModelConfig, Prefill

MAGIC = b"KVT1"
VERSION = 1
_HEADER = struct.Struct("<4s8IQ")
_F32 = np.dtype("<f4")


class TraceFormatError(KVEvictError, ValueError):
    """The file is not a well-formed trace."""


def payload_floats(cfg, n_tokens):
    """Number of float32 values following the header."""
    d = cfg.model_dim
    per_layer = (
        2 * cfg.n_kv_heads * n_tokens * cfg.head_dim
        + cfg.n_heads * (cfg.window + 1) * cfg.head_dim
        + d * d
        + 2 * FFN_EXPANSION * d * d
        + d * d
    )
    return cfg.n_layers * per_layer + d * cfg.vocab


def file_size(cfg, n_tokens):
    return _HEADER.size + 4 * payload_floats(cfg, n_tokens)


def encode(pre):
    """Serialise a :class:`Prefill` to bytes."""
    cfg = pre.config
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        cfg.n_layers,
        cfg.n_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        pre.n_tokens,
        cfg.window,
        cfg.vocab,
        cfg.seed,
    )
    parts = [header]

    def put(arr):
        parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())

    for state in pre.layers:
        put(state.keys)
        put(state.values)
        put(state.queries)
        put(state.weights.w_o)
    put(pre.w_m)
    for state in pre.layers:
        put(state.weights.ffn_in)
        put(state.weights.ffn_out)
    for state in pre.layers:
        put(state.weights.w_q)
    return b"".join(parts)


def decode(data):
    """Rebuild a :class:`Prefill` (float64 arrays) from trace bytes."""
    if len(data) < _HEADER.size:
        raise TraceFormatError("file is shorter than the trace header")
    magic, version, L, H, H_kv, d_h, N, w, vocab, seed = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TraceFormatError(f"unsupported trace version {version}")
    try:
        cfg = ModelConfig(L, H, H_kv, d_h, w, vocab, seed)
    except KVEvictError as exc:
        raise TraceFormatError(f"invalid header: {exc}") from exc
    expected = file_size(cfg, N)
    if len(data) != expected:
        raise TraceFormatError(f"trace holds {len(data)} bytes, header implies {expected}")

    flat = np.frombuffer(data, dtype=_F32, offset=_HEADER.size)
    pos = 0

    def take(*shape):
        nonlocal pos
        n = int(np.prod(shape))
        out = flat[pos : pos + n].astype(np.float64).reshape(shape)
        pos += n
        return out

    d = cfg.model_dim
    blocks = []
    for _ in range(L):
        keys = take(H_kv, N, d_h)
        values = take(H_kv, N, d_h)
        queries = take(H, w + 1, d_h)
        w_o = take(d, d)
        blocks.append((keys, values, queries, w_o))
    w_m = take(d, vocab)
    ffns = [(take(d, FFN_EXPANSION * d), take(FFN_EXPANSION * d, d)) for _ in range(L)]
    w_qs = [take(d, d) for _ in range(L)]

    empty = np.empty((d, 0))
    layers = []
    for (keys, values, queries, w_o), (f_in, f_out), w_q in zip(blocks, ffns, w_qs):
        weights = LayerWeights(w_q=w_q, w_k=empty, w_v=empty, w_o=w_o, ffn_in=f_in, ffn_out=f_out)
        layers.append(LayerState(keys, values, queries, weights))
    return Prefill(config=cfg, layers=layers, w_m=w_m)


def write_trace(path, pre):
    data = encode(pre)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_trace(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
