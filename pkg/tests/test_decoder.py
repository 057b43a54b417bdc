import numpy as np
import pytest

import resa.decoder
from resa import (EOS, SparsityConfig, decode, default_probe_steps, drift_probe,
                  oracle_cache)

from conftest import random_prompt


def _cfg(**kw):
    base = dict(block_size=8, sparsity=0.9, n_min=2, n_local=1, rectify_freq=8)
    base.update(kw)
    return SparsityConfig(**base)


class TestLoopBasics:
    def test_probe_schedule_is_powers_of_two(self):
        assert default_probe_steps(40) == [1, 2, 4, 8, 16, 32]
        assert default_probe_steps(1) == [1]

    def test_emits_requested_steps(self, ref_weights, rng):
        res = decode(ref_weights, random_prompt(rng, 32), _cfg(), 12)
        assert len(res.tokens) == 12
        assert all(0 <= t < 258 for t in res.tokens)

    def test_invalid_args(self, ref_weights):
        with pytest.raises(ValueError):
            decode(ref_weights, [1], _cfg(), 4, mode="turbo")
        with pytest.raises(ValueError):
            decode(ref_weights, [], _cfg(), 4)
        with pytest.raises(ValueError):
            decode(ref_weights, [1], _cfg(), 0)

    def test_eos_stops_generation(self, ref_weights, rng, monkeypatch):
        emitted = iter([5, 9, EOS, 7])
        monkeypatch.setattr(resa.decoder, "greedy_token",
                            lambda logits: next(emitted))
        res = decode(ref_weights, random_prompt(rng, 16), _cfg(), 10)
        assert res.tokens == [5, 9, EOS]
        # EOS itself is never written into the cache
        assert res.state.cache.length == 16 + 2


class TestModeEquivalence:
    def test_full_active_ratio_matches_dense_tokens(self, ref_weights, rng):
        cfg = _cfg(sparsity=0.0, n_min=1, rectify_freq=4)
        prompt = random_prompt(rng, 48)
        assert decode(ref_weights, prompt, cfg, 32, mode="resa").tokens \
            == decode(ref_weights, prompt, cfg, 32, mode="dense").tokens

    def test_dense_mode_has_zero_drift(self, ref_weights, rng):
        res = decode(ref_weights, random_prompt(rng, 32), _cfg(), 16,
                     mode="dense", record_drift=True)
        assert res.trace.entries
        assert all(e.max_abs <= 1e-6 for e in res.trace.entries)


class TestRectification:
    def test_fires_on_schedule(self, ref_weights, rng):
        res = decode(ref_weights, random_prompt(rng, 32), _cfg(rectify_freq=5), 12)
        # steps 5 and 10 rectify; realized length then 32+10
        assert res.state.last_rectified == 42
        assert res.counters.rectification_reads > 0

    def test_never_fires_in_sparse_only(self, ref_weights, rng):
        res = decode(ref_weights, random_prompt(rng, 32), _cfg(), 16,
                     mode="sparse_only")
        assert res.counters.rectification_reads == 0
        assert res.state.last_rectified == 32

    def test_every_step_rectification_pins_drift(self, ref_weights, rng):
        cfg = _cfg(rectify_freq=1)
        res = decode(ref_weights, random_prompt(rng, 32), cfg, 12,
                     mode="resa", record_drift=True, probe_steps=[])
        post = [e for e in res.trace.entries if e.post_rectification]
        assert len(post) == 12
        assert all(e.max_abs <= 1e-4 for e in post)

    def test_post_rectification_drift_small_at_default_freq(self, ref_weights, rng):
        res = decode(ref_weights, random_prompt(rng, 64), _cfg(rectify_freq=8), 24,
                     mode="resa", record_drift=True, probe_steps=[])
        post = [e for e in res.trace.entries if e.post_rectification]
        assert len(post) == 3
        assert all(e.max_abs <= 1e-4 for e in post)

    def test_drift_localized_to_unrectified_tail(self, ref_weights, rng):
        # after the step-8 rectification only the prefix stays exact; by step
        # 12 the four newest tokens may deviate but the rectified region holds
        cfg = _cfg(rectify_freq=8)
        prompt = random_prompt(rng, 64)
        res = decode(ref_weights, prompt, cfg, 12, mode="resa")
        cache = res.state.cache
        full = prompt + res.tokens
        oracle = oracle_cache(ref_weights, full[: cache.length], cfg.block_size)
        rect_end = res.state.last_rectified
        worst_prefix = 0.0
        for layer in range(cache.n_layers):
            for head in range(cache.n_kv_heads):
                diff = np.abs(cache.keys(layer, head)[:rect_end]
                              - oracle.keys(layer, head)[:rect_end])
                worst_prefix = max(worst_prefix, float(diff.max()))
        assert worst_prefix <= 1e-4


class TestDriftOrdering:
    def test_sparse_only_drifts_and_resa_recovers(self, ref_weights, rng):
        prompt = random_prompt(rng, 64)
        cfg = _cfg(sparsity=0.9, rectify_freq=8)
        so = decode(ref_weights, prompt, cfg, 32, mode="sparse_only",
                    record_drift=True, probe_steps=[8, 32])
        assert so.trace.at_step(32).max_abs >= so.trace.at_step(8).max_abs
        assert so.trace.at_step(32).max_abs > 0.0
        rs = decode(ref_weights, prompt, cfg, 32, mode="resa",
                    record_drift=True, probe_steps=[])
        post = [e.max_abs for e in rs.trace.entries if e.post_rectification]
        assert max(post) <= 1e-4

    def test_probe_function_agrees_with_manual_oracle_diff(self, ref_weights, rng):
        prompt = random_prompt(rng, 40)
        res = decode(ref_weights, prompt, _cfg(), 8, mode="sparse_only")
        cache = res.state.cache
        realized = prompt + res.tokens
        max_abs, mean_l2 = drift_probe(ref_weights, cache, realized)
        oracle = oracle_cache(ref_weights, realized[: cache.length],
                              cache.block_size)
        manual = max(float(np.abs(cache.keys(l, h)[: cache.length]
                                  - oracle.keys(l, h)[: cache.length]).max())
                     for l in range(2) for h in range(2))
        assert max_abs == pytest.approx(manual, rel=1e-9)
        assert mean_l2 >= 0.0
