"""Block-paged KV cache with descriptor maintenance and read accounting.

Storage is one contiguous fp32 buffer per (layer, kv-head) lane, paged
in logical blocks of ``block_size`` tokens.  Min/max key descriptors
are kept in lockstep with the key blocks: appends update them
incrementally, tail rectification rebuilds every block overlapping the
rewritten window (min/max cannot be downdated, so overlap-rebuild is
the minimal correct refresh).

Read accounting is in abstract fp32 element reads: one element is one
fp32 of K or V touched by attention, or one fp32 of a descriptor
touched by selection.  The exact charging formulas live in
`MemCounters`' charge_* helpers so that measurement and the closed-form
per-step model (1/b + active_ratio + 1/rectify_freq, relative to dense
reads of the full cache) stay comparable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .block_index import SparsityConfig

SNAPSHOT_MAGIC = b"RESAKV1"


class RectifyAlignmentError(ValueError):
    pass


@dataclass
class MemCounters:
    """Monotone element-read counters for one decode run."""

    selection_reads: int = 0
    attention_reads: int = 0
    rectification_reads: int = 0
    dense_baseline_reads: int = 0
    steps: int = 0

    def charge_selection(self, num_blocks, head_dim, lanes=1):
        # one kmin + one kmax vector per block per lane
        self.selection_reads += lanes * num_blocks * 2 * head_dim

    def charge_attention(self, num_tokens, head_dim, lanes=1):
        # one K + one V vector per attended token per lane
        self.attention_reads += lanes * num_tokens * 2 * head_dim

    def charge_rectification(self, cache_len, head_dim, lanes=1):
        self.rectification_reads += lanes * cache_len * 2 * head_dim

    def charge_dense_baseline(self, cache_len, head_dim, lanes=1):
        self.dense_baseline_reads += lanes * cache_len * 2 * head_dim

    def end_step(self):
        self.steps += 1

    @property
    def total_reads(self):
        return self.selection_reads + self.attention_reads + self.rectification_reads


@dataclass
class MemReport:
    steps: int
    selection_per_step: float
    attention_per_step: float
    rectification_per_step: float
    dense_per_step: float
    measured_ratio: float
    predicted_ratio: float
    rectification_share: float


def predicted_access_ratio(cfg: SparsityConfig, rectify_enabled: bool = True) -> float:
    """Closed-form per-step read ratio vs dense decoding."""
    r = 1.0 / cfg.block_size + cfg.active_ratio
    if rectify_enabled:
        r += 1.0 / cfg.rectify_freq
    return r


def charge_and_report(counters: MemCounters, cfg: SparsityConfig,
                      rectify_enabled: bool = True) -> MemReport:
    steps = max(counters.steps, 1)
    total = counters.total_reads
    dense = max(counters.dense_baseline_reads, 1)
    return MemReport(
        steps=counters.steps,
        selection_per_step=counters.selection_reads / steps,
        attention_per_step=counters.attention_reads / steps,
        rectification_per_step=counters.rectification_reads / steps,
        dense_per_step=counters.dense_baseline_reads / steps,
        measured_ratio=total / dense,
        predicted_ratio=predicted_access_ratio(cfg, rectify_enabled),
        rectification_share=counters.rectification_reads / total if total else 0.0,
    )


class PagedKvCache:
    """Per-(layer, kv-head) block-paged key/value storage."""

    def __init__(self, n_layers, n_kv_heads, head_dim, block_size):
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.block_size = block_size
        self._cap = 0
        self._k = np.zeros((n_layers, n_kv_heads, 0, head_dim), dtype=np.float32)
        self._v = np.zeros_like(self._k)
        self._kmin = np.zeros((n_layers, n_kv_heads, 0, head_dim), dtype=np.float32)
        self._kmax = np.zeros_like(self._kmin)
        self._lane_len = np.zeros((n_layers, n_kv_heads), dtype=np.int64)

    # -- geometry ---------------------------------------------------------

    @property
    def length(self) -> int:
        """Token count, valid only when all lanes agree."""
        n = int(self._lane_len[0, 0])
        if not np.all(self._lane_len == n):
            raise RuntimeError("lane lengths diverged mid-round")
        return n

    def lane_length(self, layer, head) -> int:
        return int(self._lane_len[layer, head])

    @property
    def num_blocks(self) -> int:
        return -(-self.length // self.block_size)

    def _ensure_capacity(self, n_tokens):
        if n_tokens <= self._cap:
            return
        b = self.block_size
        new_cap = max(b, self._cap * 2)
        while new_cap < n_tokens:
            new_cap *= 2
        new_cap = -(-new_cap // b) * b
        def grow(a, cap_rows):
            out = np.zeros(a.shape[:2] + (cap_rows, a.shape[3]), dtype=np.float32)
            out[:, :, : a.shape[2]] = a
            return out
        self._k = grow(self._k, new_cap)
        self._v = grow(self._v, new_cap)
        self._kmin = grow(self._kmin, new_cap // b)
        self._kmax = grow(self._kmax, new_cap // b)
        self._cap = new_cap

    # -- views ------------------------------------------------------------

    def keys(self, layer, head) -> np.ndarray:
        """Flat [capacity, d] key buffer for one lane (valid rows: lane length)."""
        return self._k[layer, head]

    def values(self, layer, head) -> np.ndarray:
        return self._v[layer, head]

    def descriptor_arrays(self, layer, head):
        """(kmin, kmax) stacked over the lane's current blocks."""
        nb = -(-self.lane_length(layer, head) // self.block_size)
        return self._kmin[layer, head, :nb], self._kmax[layer, head, :nb]

    def block_fill(self, block_idx) -> int:
        n = self.length
        full = (block_idx + 1) * self.block_size
        return self.block_size if full <= n else n - block_idx * self.block_size

    # -- mutation ---------------------------------------------------------

    def append(self, layer, head, key, value):
        """Append one token's K/V to one lane, updating its descriptor."""
        pos = int(self._lane_len[layer, head])
        self._ensure_capacity(pos + 1)
        key = np.asarray(key, dtype=np.float32)
        self._k[layer, head, pos] = key
        self._v[layer, head, pos] = np.asarray(value, dtype=np.float32)
        blk, off = divmod(pos, self.block_size)
        if off == 0:
            self._kmin[layer, head, blk] = key
            self._kmax[layer, head, blk] = key
        else:
            np.minimum(self._kmin[layer, head, blk], key, out=self._kmin[layer, head, blk])
            np.maximum(self._kmax[layer, head, blk], key, out=self._kmax[layer, head, blk])
        self._lane_len[layer, head] = pos + 1

    def append_token(self, layer, keys, values):
        """Append one token across all heads of one layer ([H, d] each)."""
        pos = self.length_of_layer(layer)
        self._ensure_capacity(pos + 1)
        keys = np.asarray(keys, dtype=np.float32)
        self._k[layer, :, pos] = keys
        self._v[layer, :, pos] = np.asarray(values, dtype=np.float32)
        blk, off = divmod(pos, self.block_size)
        if off == 0:
            self._kmin[layer, :, blk] = keys
            self._kmax[layer, :, blk] = keys
        else:
            np.minimum(self._kmin[layer, :, blk], keys, out=self._kmin[layer, :, blk])
            np.maximum(self._kmax[layer, :, blk], keys, out=self._kmax[layer, :, blk])
        self._lane_len[layer, :] += 1

    def length_of_layer(self, layer) -> int:
        n = int(self._lane_len[layer, 0])
        if not np.all(self._lane_len[layer] == n):
            raise RuntimeError("lane lengths diverged within layer")
        return n

    def extend_layer(self, layer, keys, values):
        """Append a batch of tokens ([H, t, d]) to every lane of one layer."""
        keys = np.asarray(keys, dtype=np.float32)
        values = np.asarray(values, dtype=np.float32)
        t = keys.shape[1]
        pos = self.length_of_layer(layer)
        self._ensure_capacity(pos + t)
        self._k[layer, :, pos : pos + t] = keys
        self._v[layer, :, pos : pos + t] = values
        self._lane_len[layer, :] += t
        self._rebuild_descriptors(layer, pos, pos + t)

    def _rebuild_descriptors(self, layer, lo_pos, hi_pos):
        """Recompute min/max for every block of one layer overlapping [lo, hi)."""
        b = self.block_size
        blk_lo = lo_pos // b
        blk_hi = -(-hi_pos // b)
        n = self.length_of_layer(layer)
        for blk in range(blk_lo, blk_hi):
            s, e = blk * b, min((blk + 1) * b, n)
            chunk = self._k[layer, :, s:e]
            self._kmin[layer, :, blk] = chunk.min(axis=1)
            self._kmax[layer, :, blk] = chunk.max(axis=1)

    def rectify_tail(self, layer, head, start_pos, new_keys, new_values):
        """Overwrite the trailing window of one lane and refresh its descriptors."""
        new_keys = np.asarray(new_keys, dtype=np.float32)
        new_values = np.asarray(new_values, dtype=np.float32)
        n = self.lane_length(layer, head)
        if start_pos < 0 or start_pos + new_keys.shape[0] != n:
            raise RectifyAlignmentError("rectify window misaligned")
        self._k[layer, head, start_pos:n] = new_keys
        self._v[layer, head, start_pos:n] = new_values
        b = self.block_size
        for blk in range(start_pos // b, -(-n // b)):
            s, e = blk * b, min((blk + 1) * b, n)
            chunk = self._k[layer, head, s:e]
            self._kmin[layer, head, blk] = chunk.min(axis=0)
            self._kmax[layer, head, blk] = chunk.max(axis=0)

    def rectify_tail_layer(self, layer, start_pos, new_keys, new_values):
        """Vectorized tail rectification over all lanes of one layer ([H, t, d])."""
        new_keys = np.asarray(new_keys, dtype=np.float32)
        new_values = np.asarray(new_values, dtype=np.float32)
        n = self.length_of_layer(layer)
        if start_pos < 0 or start_pos + new_keys.shape[1] != n:
            raise RectifyAlignmentError("rectify window misaligned")
        self._k[layer, :, start_pos:n] = new_keys
        self._v[layer, :, start_pos:n] = new_values
        self._rebuild_descriptors(layer, start_pos, n)

    def copy(self) -> "PagedKvCache":
        """Deep copy; used to fork one prefill into several decode runs."""
        out = PagedKvCache(self.n_layers, self.n_kv_heads, self.head_dim, self.block_size)
        out._cap = self._cap
        out._k = self._k.copy()
        out._v = self._v.copy()
        out._kmin = self._kmin.copy()
        out._kmax = self._kmax.copy()
        out._lane_len = self._lane_len.copy()
        return out

    # -- snapshot ---------------------------------------------------------

    def save(self, path):
        """Flat little-endian fp32 snapshot for checkpointing drift runs."""
        n = self.length
        with open(path, "wb") as fh:
            fh.write(SNAPSHOT_MAGIC)
            fh.write(struct.pack("<4I", self.n_layers, self.n_kv_heads, self.block_size, n))
            for layer in range(self.n_layers):
                for head in range(self.n_kv_heads):
                    fh.write(self._k[layer, head, :n].astype("<f4").tobytes())
                    fh.write(self._v[layer, head, :n].astype("<f4").tobytes())

    @classmethod
    def load(cls, path, head_dim=None):
        with open(path, "rb") as fh:
            magic = fh.read(len(SNAPSHOT_MAGIC))
            if magic != SNAPSHOT_MAGIC:
                raise ValueError("bad snapshot header")
            n_layers, n_kv_heads, block_size, n = struct.unpack("<4I", fh.read(16))
            payload = fh.read()
        if head_dim is None:
            lane_bytes = n_layers * n_kv_heads * n * 2 * 4
            if lane_bytes == 0:
                raise ValueError("head_dim required to load an empty snapshot")
            if len(payload) % lane_bytes != 0:
                raise ValueError("snapshot payload size mismatch")
            head_dim = len(payload) // lane_bytes
        cache = cls(n_layers, n_kv_heads, head_dim, block_size)
        data = np.frombuffer(payload, dtype="<f4").reshape(n_layers, n_kv_heads, 2, n, head_dim)
        for layer in range(n_layers):
            kv = data[layer]
            cache.extend_layer(layer, kv[:, 0], kv[:, 1])
        return cache
