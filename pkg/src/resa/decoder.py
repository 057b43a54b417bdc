"""Greedy decode loop: prefill, sparse steps, periodic dense rectification.

Three modes share one loop:

* ``dense``       - every step attends to the full cache (the oracle),
* ``sparse_only`` - block-sparse steps, never rectified,
* ``resa``        - block-sparse steps with a dense re-encode of the
                    last ``rectify_freq`` tokens whenever the step count
                    hits a multiple of the frequency.

Drift instrumentation compares the live cache's K entries against a
from-scratch dense teacher-forced encode of the realized token
sequence.  Probes are O(n^2) and intended for desk-scale runs only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .block_index import SparsityConfig
from .kv_cache import MemCounters, PagedKvCache
from .model import (EOS, ModelWeights, dense_forward_batch, greedy_token,
                    oracle_cache, prefill, sparse_forward)

MODES = ("dense", "sparse_only", "resa")


@dataclass
class DriftEntry:
    step: int
    max_abs: float
    mean_l2: float
    post_rectification: bool = False


@dataclass
class DriftTrace:
    entries: list[DriftEntry] = field(default_factory=list)

    def at_step(self, step, post_rectification=None):
        for e in self.entries:
            if e.step == step and (post_rectification is None
                                   or e.post_rectification == post_rectification):
                return e
        return None


@dataclass
class DecodeState:
    cache: PagedKvCache
    counters: MemCounters
    cfg: SparsityConfig
    prefill_len: int
    generated: list[int] = field(default_factory=list)
    step: int = 0
    last_rectified: int = 0


@dataclass
class DecodeResult:
    tokens: list[int]
    counters: MemCounters
    trace: DriftTrace | None
    state: DecodeState


def default_probe_steps(max_steps: int) -> list[int]:
    steps, p = [], 1
    while p <= max_steps:
        steps.append(p)
        p *= 2
    return steps


def drift_probe(weights: ModelWeights, cache: PagedKvCache, realized_tokens):
    """Max-abs and mean-L2 deviation of cached K entries from the dense oracle."""
    n = cache.length
    oracle = oracle_cache(weights, realized_tokens[:n], cache.block_size)
    max_abs = 0.0
    l2_sum, l2_count = 0.0, 0
    for layer in range(cache.n_layers):
        for head in range(cache.n_kv_heads):
            diff = (cache.keys(layer, head)[:n].astype(np.float64)
                    - oracle.keys(layer, head)[:n].astype(np.float64))
            if diff.size:
                max_abs = max(max_abs, float(np.abs(diff).max()))
                l2_sum += float(np.linalg.norm(diff, axis=1).sum())
                l2_count += diff.shape[0]
    return max_abs, (l2_sum / l2_count if l2_count else 0.0)


def decode(weights: ModelWeights, prompt, cfg: SparsityConfig, max_steps: int,
           mode: str = "resa", record_drift: bool = False,
           probe_steps=None) -> DecodeResult:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    prompt = list(prompt)
    if not prompt:
        raise ValueError("empty prompt")
    mcfg = weights.config
    cache = PagedKvCache(mcfg.n_layers, mcfg.n_kv_heads, mcfg.head_dim, cfg.block_size)
    state = DecodeState(cache=cache, counters=MemCounters(), cfg=cfg,
                        prefill_len=len(prompt), last_rectified=len(prompt))
    trace = DriftTrace() if record_drift else None
    probes = set(probe_steps if probe_steps is not None
                 else default_probe_steps(max_steps)) if record_drift else set()

    logits = prefill(weights, prompt, cache)
    realized = list(prompt)

    def probe(step, post_rect):
        max_abs, mean_l2 = drift_probe(weights, cache, realized)
        trace.entries.append(DriftEntry(step, max_abs, mean_l2, post_rect))

    for i in range(1, max_steps + 1):
        token = greedy_token(logits)
        state.generated.append(token)
        if token == EOS:
            break
        realized.append(token)
        logits = sparse_forward(weights, token, cache, cfg, state.counters,
                                dense=(mode == "dense"))
        state.step = i
        if mode == "resa" and i % cfg.rectify_freq == 0:
            f = cfg.rectify_freq
            dense_forward_batch(weights, realized[-f:], cache,
                                start_pos=len(realized) - f, counters=state.counters)
            state.last_rectified = len(realized)
            if record_drift:
                probe(i, post_rect=True)
        if record_drift and i in probes:
            probe(i, post_rect=False)
    return DecodeResult(tokens=list(state.generated), counters=state.counters,
                        trace=trace, state=state)
