"""Toy decoder-only GQA transformer used as the system under test.

Architecture: pre-RMSNorm, rotary embeddings on q/k, SwiGLU FFN, tied
LM head, byte-level vocabulary (256 bytes + BOS/EOS).  Weights are not
trained; they are generated deterministically from a 64-bit seed via a
SplitMix64 counter stream so that any two runs (or implementations)
produce bitwise-identical parameters.

Three forward entry points:

* `prefill`       - dense causal encode of the prompt into the cache,
* `sparse_forward`- single-token decode step with block selection,
* `dense_forward_batch` - dense re-encode of the trailing window,
                    overwriting the possibly drifted cache entries.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .attention import BlockMask, _gbsa
from .block_index import SparsityConfig, pool_queries, score_blocks, select_blocks_scored
from .kv_cache import MemCounters, PagedKvCache

BOS = 256
EOS = 257
VOCAB_SIZE = 258

WEIGHT_MAGIC = b"RESAW1"

_GOLDEN = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_query_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 128
    vocab_size: int = VOCAB_SIZE
    rope_theta: float = 10000.0
    seed: int = 0x5EED_0001

    def __post_init__(self):
        if self.n_query_heads % self.n_kv_heads != 0:
            raise ValueError("n_query_heads must be divisible by n_kv_heads")
        if self.d_model != self.n_query_heads * self.head_dim:
            raise ValueError("d_model must equal n_query_heads * head_dim")

    @property
    def group_size(self) -> int:
        return self.n_query_heads // self.n_kv_heads

    @property
    def scale(self) -> float:
        return 1.0 / np.sqrt(self.head_dim)


@dataclass
class LayerWeights:
    attn_norm: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ffn_norm: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray


@dataclass
class ModelWeights:
    config: ModelConfig
    embedding: np.ndarray  # [vocab, d_model]; also the tied LM head
    layers: list[LayerWeights]
    final_norm: np.ndarray


# -- deterministic weight generation --------------------------------------


def _fnv1a64(name: str) -> int:
    h = 0xCBF29CE484222325
    for byte in name.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _MASK64
    return h


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def _uniform_stream(seed: int, name: str, count: int) -> np.ndarray:
    """count fp64 uniforms in [0, 1), random-access keyed by (seed, name)."""
    with np.errstate(over="ignore"):  # uint64 wraparound is the whole point
        base = _mix64(np.asarray((seed ^ _fnv1a64(name)) & _MASK64, dtype=np.uint64))
        idx = np.arange(1, count + 1, dtype=np.uint64)
        z = _mix64(base + idx * np.uint64(_GOLDEN))
    return (z >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def _draw_matrix(seed, name, rows, cols, fan_in) -> np.ndarray:
    u = _uniform_stream(seed, name, rows * cols)
    bound = 1.0 / np.sqrt(fan_in)
    return ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(rows, cols)


def _draw_gain(seed, name, size, fan_in) -> np.ndarray:
    # norm gains hover around 1 so activations keep a usable scale
    u = _uniform_stream(seed, name, size)
    return (1.0 + (2.0 * u - 1.0) / np.sqrt(fan_in)).astype(np.float32)


def generate_weights(cfg: ModelConfig) -> ModelWeights:
    s, D, F = cfg.seed, cfg.d_model, cfg.ffn_dim
    hq = cfg.n_query_heads * cfg.head_dim
    hk = cfg.n_kv_heads * cfg.head_dim
    layers = []
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        layers.append(LayerWeights(
            attn_norm=_draw_gain(s, p + "attn_norm", D, D),
            wq=_draw_matrix(s, p + "wq", D, hq, D),
            wk=_draw_matrix(s, p + "wk", D, hk, D),
            wv=_draw_matrix(s, p + "wv", D, hk, D),
            wo=_draw_matrix(s, p + "wo", hq, D, hq),
            ffn_norm=_draw_gain(s, p + "ffn_norm", D, D),
            w_gate=_draw_matrix(s, p + "w_gate", D, F, D),
            w_up=_draw_matrix(s, p + "w_up", D, F, D),
            w_down=_draw_matrix(s, p + "w_down", F, D, F),
        ))
    return ModelWeights(
        config=cfg,
        embedding=_draw_matrix(s, "embedding", cfg.vocab_size, D, D),
        layers=layers,
        final_norm=_draw_gain(s, "final_norm", D, D),
    )


# -- numerics --------------------------------------------------------------



def _mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """fp32 matmul with fp64 accumulation, so that single-token and batched
    forward passes produce matching results after the fp32 cast."""
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)

def rmsnorm(x: np.ndarray, gain: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x64 = x.astype(np.float64)
    rms = np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return ((x64 / rms) * gain.astype(np.float64)).astype(np.float32)


def rope(x: np.ndarray, positions: np.ndarray, theta: float) -> np.ndarray:
    """Rotary embedding, half-split pairing: dims (i, i + d/2) rotate together."""
    d = x.shape[-1]
    half = d // 2
    freqs = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / d)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freqs  # [..., t, half]
    cos, sin = np.cos(ang), np.sin(ang)
    x64 = x.astype(np.float64)
    x1, x2 = x64[..., :half], x64[..., half:]
    out = np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)
    return out.astype(np.float32)


def _swiglu(x: np.ndarray, lw: LayerWeights) -> np.ndarray:
    g = _mm(x, lw.w_gate)
    silu = g / (1.0 + np.exp(-g.astype(np.float64))).astype(np.float32)
    return _mm(silu * _mm(x, lw.w_up), lw.w_down)


def greedy_token(logits: np.ndarray) -> int:
    """argmax with lowest-token-id tie-break."""
    return int(np.argmax(logits))


# -- batched dense encode (prefill / rectification) ------------------------


_CHUNK = 256  # query rows per attention chunk, bounds fp64 score memory


def _dense_encode(weights: ModelWeights, tokens, cache: PagedKvCache, start_pos: int,
                  overwrite: bool):
    """Causal dense forward of ``tokens`` at positions [start_pos, start_pos+t).

    Appends K/V to the cache (prefill) or overwrites the trailing
    window (rectification).  Returns the final-norm hidden states
    [t, d_model].
    """
    cfg = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("empty token batch")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
        raise ValueError("token out of range")
    t = tokens.shape[0]
    positions = np.arange(start_pos, start_pos + t)
    x = weights.embedding[tokens]  # [t, D]
    g = cfg.group_size
    for layer, lw in enumerate(weights.layers):
        h = rmsnorm(x, lw.attn_norm)
        q = _mm(h, lw.wq).reshape(t, cfg.n_kv_heads, g, cfg.head_dim)
        k = _mm(h, lw.wk).reshape(t, cfg.n_kv_heads, cfg.head_dim)
        v = _mm(h, lw.wv).reshape(t, cfg.n_kv_heads, cfg.head_dim)
        q = rope(q.transpose(1, 2, 0, 3), positions, cfg.rope_theta)  # [H, g, t, d]
        k = rope(k.transpose(1, 0, 2), positions, cfg.rope_theta)     # [H, t, d]
        v = v.transpose(1, 0, 2)
        if overwrite:
            if cache.length_of_layer(layer) != start_pos + t:
                raise ValueError("rectify window misaligned")
            cache.rectify_tail_layer(layer, start_pos, k, v)
        else:
            if cache.length_of_layer(layer) != start_pos:
                raise ValueError("prefill into non-empty cache misaligned")
            cache.extend_layer(layer, k, v)
        n = start_pos + t
        attn = np.empty((cfg.n_kv_heads, g, t, cfg.head_dim), dtype=np.float32)
        for head in range(cfg.n_kv_heads):
            k_full = cache.keys(layer, head)[:n].astype(np.float64)
            v_full = cache.values(layer, head)[:n].astype(np.float64)
            for lo in range(0, t, _CHUNK):
                hi = min(lo + _CHUNK, t)
                qc = q[head, :, lo:hi].astype(np.float64)  # [g, c, d]
                scores = qc @ k_full.T * cfg.scale  # [g, c, n]
                kpos = np.arange(n)
                valid = kpos[None, :] <= positions[lo:hi, None]
                scores = np.where(valid[None, :, :], scores, -np.inf)
                m = scores.max(axis=2, keepdims=True)
                w = np.exp(scores - m)
                out = (w @ v_full) / w.sum(axis=2, keepdims=True)
                attn[head, :, lo:hi] = out.astype(np.float32)
        merged = attn.transpose(2, 0, 1, 3).reshape(t, cfg.n_query_heads * cfg.head_dim)
        x = x + _mm(merged, lw.wo)
        x = x + _swiglu(rmsnorm(x, lw.ffn_norm), lw)
    return rmsnorm(x, weights.final_norm)


def prefill(weights: ModelWeights, tokens, cache: PagedKvCache) -> np.ndarray:
    """Dense-encode the prompt into an empty cache; returns last-position logits."""
    hidden = _dense_encode(weights, tokens, cache, start_pos=0, overwrite=False)
    return _mm(hidden[-1], weights.embedding.T)


def dense_logits_all(weights: ModelWeights, tokens) -> np.ndarray:
    """Teacher-forced dense forward of a whole sequence; logits per position."""
    cfg = weights.config
    cache = PagedKvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, 16)
    hidden = _dense_encode(weights, tokens, cache, start_pos=0, overwrite=False)
    return _mm(hidden, weights.embedding.T)


def oracle_cache(weights: ModelWeights, tokens, block_size: int) -> PagedKvCache:
    """Dense teacher-forced cache over the realized tokens (drift ground truth)."""
    cfg = weights.config
    cache = PagedKvCache(cfg.n_layers, cfg.n_kv_heads, cfg.head_dim, block_size)
    _dense_encode(weights, tokens, cache, start_pos=0, overwrite=False)
    return cache


def dense_forward_batch(weights: ModelWeights, tokens, cache: PagedKvCache,
                        start_pos: int, counters: MemCounters | None = None):
    """Re-encode the last ``len(tokens)`` positions densely, in place."""
    _dense_encode(weights, tokens, cache, start_pos=start_pos, overwrite=True)
    if counters is not None:
        lanes = weights.config.n_layers * weights.config.n_kv_heads
        counters.charge_rectification(cache.length, weights.config.head_dim, lanes)


# -- single-token decode ---------------------------------------------------


def sparse_forward(weights: ModelWeights, token: int, cache: PagedKvCache,
                   cfg: SparsityConfig, counters: MemCounters | None = None,
                   dense: bool = False) -> np.ndarray:
    """One decode step: project, append K/V, select blocks, attend, predict.

    With ``dense=True`` (or within the dense-prefix layers) the full
    block mask is used and no selection reads are charged.
    """
    mcfg = weights.config
    if not (0 <= token < mcfg.vocab_size):
        raise ValueError("token out of range")
    pos = cache.length
    g = mcfg.group_size
    x = weights.embedding[token].copy()
    for layer, lw in enumerate(weights.layers):
        h = rmsnorm(x, lw.attn_norm)
        q = _mm(h, lw.wq).reshape(mcfg.n_kv_heads, g, mcfg.head_dim)
        k = _mm(h, lw.wk).reshape(mcfg.n_kv_heads, mcfg.head_dim)
        v = _mm(h, lw.wv).reshape(mcfg.n_kv_heads, mcfg.head_dim)
        q = rope(q, np.array(pos), mcfg.rope_theta)
        k = rope(k, np.array(pos), mcfg.rope_theta)
        cache.append_token(layer, k, v)
        layer_dense = dense or layer < cfg.dense_prefix_layers
        nb = -(-cache.length_of_layer(layer) // cfg.block_size)
        attn = np.empty((mcfg.n_kv_heads, g, mcfg.head_dim), dtype=np.float32)
        for head in range(mcfg.n_kv_heads):
            if layer_dense:
                mask = BlockMask.full(nb)
            else:
                kmin, kmax = cache.descriptor_arrays(layer, head)
                pooled = pool_queries(q[head])
                mask = select_blocks_scored(score_blocks(pooled, kmin, kmax), nb, cfg)
                if counters is not None:
                    counters.charge_selection(nb, mcfg.head_dim)
            attn[head] = _gbsa(q[head], cache.keys(layer, head), cache.values(layer, head),
                               mask, pos, mcfg.scale, block_size=cfg.block_size)
            if counters is not None:
                counters.charge_attention(_mask_token_count(mask, cfg.block_size, pos),
                                          mcfg.head_dim)
        x = x + _mm(attn.reshape(mcfg.n_query_heads * mcfg.head_dim), lw.wo)
        x = x + _swiglu(rmsnorm(x, lw.ffn_norm), lw)
    if counters is not None:
        lanes = mcfg.n_layers * mcfg.n_kv_heads
        counters.charge_dense_baseline(pos + 1, mcfg.head_dim, lanes)
        counters.end_step()
    return _mm(rmsnorm(x, weights.final_norm), weights.embedding.T)


def _mask_token_count(mask: BlockMask, block_size: int, current_pos: int) -> int:
    count = 0
    for blk in mask.selected:
        lo = blk * block_size
        if lo <= current_pos:
            count += min((blk + 1) * block_size, current_pos + 1) - lo
    return count


# -- weight file I/O -------------------------------------------------------


def _tensor_order(w: ModelWeights):
    yield w.embedding
    for lw in w.layers:
        yield from (lw.attn_norm, lw.wq, lw.wk, lw.wv, lw.wo,
                    lw.ffn_norm, lw.w_gate, lw.w_up, lw.w_down)
    yield w.final_norm


def save_weights(w: ModelWeights, path):
    cfg = w.config
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(struct.pack("<7I d Q", cfg.n_layers, cfg.d_model, cfg.n_query_heads,
                             cfg.n_kv_heads, cfg.head_dim, cfg.ffn_dim, cfg.vocab_size,
                             cfg.rope_theta, cfg.seed))
        for tensor in _tensor_order(w):
            fh.write(tensor.astype("<f4").tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        if fh.read(len(WEIGHT_MAGIC)) != WEIGHT_MAGIC:
            raise ValueError("bad weight header")
        hdr = struct.unpack("<7I d Q", fh.read(struct.calcsize("<7I d Q")))
        payload = np.frombuffer(fh.read(), dtype="<f4")
    cfg = ModelConfig(n_layers=hdr[0], d_model=hdr[1], n_query_heads=hdr[2],
                      n_kv_heads=hdr[3], head_dim=hdr[4], ffn_dim=hdr[5],
                      vocab_size=hdr[6], rope_theta=hdr[7], seed=hdr[8])
    ref = generate_weights(cfg)  # shapes template; values overwritten below
    offset = 0
    for tensor in _tensor_order(ref):
        n = tensor.size
        tensor[...] = payload[offset : offset + n].reshape(tensor.shape)
        offset += n
    if offset != payload.size:
        raise ValueError("weight payload size mismatch")
    return ref
