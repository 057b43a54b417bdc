"""Numerically stable attention primitives.

Three flavors over plain fp32 buffers:

* dense attention over a flat key/value sequence,
* group block sparse attention restricted to a selected set of
  contiguous key blocks (all query heads of one GQA group share the
  selection),
* a split/combine path where disjoint subsets of the selected blocks
  are attended independently and merged via their log-denominators.

Scores, softmax numerators and denominators are accumulated in fp64 so
that split results agree tightly with the monolithic path; inputs and
outputs are fp32.  All functions are pure and thread-safe.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Additive constant used to mask out invalid (future / unfilled) slots
# before the softmax.  exp(MASK_VALUE - max) underflows to exactly 0.
MASK_VALUE = -1.0e6


class EmptyContextError(ValueError):
    pass


class EmptySelectionError(ValueError):
    pass


@dataclass(frozen=True)
class BlockMask:
    """Sparse representation of one query row of the block mask.

    ``selected`` holds the indices of active blocks, sorted ascending
    and unique; ``total_blocks`` is the number of blocks currently in
    the cache.
    """

    selected: tuple[int, ...]
    total_blocks: int

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selected)
        object.__setattr__(self, "selected", sel)
        if list(sel) != sorted(set(sel)):
            raise ValueError("block indices must be unique and sorted ascending")
        if sel and (sel[0] < 0 or sel[-1] >= self.total_blocks):
            raise ValueError("block index out of range")

    @classmethod
    def full(cls, total_blocks: int) -> "BlockMask":
        return cls(tuple(range(total_blocks)), total_blocks)


@dataclass(frozen=True)
class PartialAttnResult:
    """Partial output of one split plus its log-denominator.

    ``logsum`` is the log of the softmax denominator restricted to this
    partition (computed max-shifted); ``out`` is the partition-local
    normalized output.  An empty partition is flagged explicitly rather
    than encoded with sentinel numbers.
    """

    out: np.ndarray | None
    logsum: float
    maxscore: float
    empty: bool = False

    @classmethod
    def make_empty(cls) -> "PartialAttnResult":
        return cls(out=None, logsum=0.0, maxscore=0.0, empty=True)


def dense_attention(q, keys, values, scale):
    """softmax(q . K^T * scale) V with max-subtraction for stability."""
    keys = np.asarray(keys, dtype=np.float32)
    values = np.asarray(values, dtype=np.float32)
    if keys.shape[0] == 0:
        raise EmptyContextError("empty context")
    scores = keys.astype(np.float64) @ np.asarray(q, dtype=np.float64) * scale
    m = scores.max()
    w = np.exp(scores - m)
    out = (w @ values.astype(np.float64)) / w.sum()
    return out.astype(np.float32)


def _block_token_indices(mask: BlockMask, block_size, current_pos):
    """Flat token indices covered by the mask, clipped to <= current_pos."""
    if len(mask.selected) == mask.total_blocks:
        # full mask: one contiguous prefix
        end = min(mask.total_blocks * block_size, current_pos + 1)
        return np.arange(max(end, 0), dtype=np.int64)
    idx = []
    for blk in mask.selected:
        lo = blk * block_size
        hi = min((blk + 1) * block_size, current_pos + 1)
        if lo <= current_pos:
            idx.append(np.arange(lo, hi))
    if not idx:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(idx)


def group_block_sparse_attention(group_queries, keys, values, mask, current_pos, scale,
                                 block_size=None):
    """Attention restricted to the selected blocks, shared across a GQA group.

    ``keys`` / ``values`` are flat [capacity, d] buffers paged in
    contiguous blocks; when ``block_size`` is omitted it is inferred
    from capacity / total_blocks (valid only for exactly-sized
    buffers).  Positions beyond ``current_pos`` inside a partially
    filled selected block are masked out before the softmax.
    """
    return _gbsa(group_queries, keys, values, mask, current_pos, scale, block_size)


def _gbsa(group_queries, keys, values, mask, current_pos, scale, block_size=None):
    qs = np.atleast_2d(np.asarray(group_queries, dtype=np.float32))
    if block_size is None:
        block_size = _infer_block_size(keys, mask)
    tok = _block_token_indices(mask, block_size, current_pos)
    if tok.size == 0:
        raise EmptySelectionError("empty selection")
    k = np.asarray(keys, dtype=np.float32)[tok].astype(np.float64)
    v = np.asarray(values, dtype=np.float32)[tok].astype(np.float64)
    scores = qs.astype(np.float64) @ k.T * scale  # [g, t]
    m = scores.max(axis=1, keepdims=True)
    w = np.exp(scores - m)
    out = (w @ v) / w.sum(axis=1, keepdims=True)
    out = out.astype(np.float32)
    if np.asarray(group_queries).ndim == 1:
        return out[0]
    return out


def _infer_block_size(keys, mask: BlockMask):
    capacity = np.asarray(keys).shape[0]
    if mask.total_blocks <= 0:
        raise EmptySelectionError("empty selection")
    # capacity is always a whole number of blocks in the paged cache;
    # standalone callers can pass exactly total_blocks * b rows.
    if capacity % mask.total_blocks != 0:
        raise ValueError("key buffer is not a whole number of blocks")
    return capacity // mask.total_blocks


def partial_attention(q, keys, values, assigned_blocks, current_pos, scale, block_size=None):
    """Attend to one split of the selection, returning a combinable partial."""
    if block_size is None:
        block_size = _infer_block_size(keys, assigned_blocks)
    tok = _block_token_indices(assigned_blocks, block_size, current_pos)
    if tok.size == 0:
        return PartialAttnResult.make_empty()
    k = np.asarray(keys, dtype=np.float32)[tok].astype(np.float64)
    v = np.asarray(values, dtype=np.float32)[tok].astype(np.float64)
    scores = k @ np.asarray(q, dtype=np.float64) * scale
    m = float(scores.max())
    w = np.exp(scores - m)
    denom = float(w.sum())
    out = ((w @ v) / denom).astype(np.float32)
    return PartialAttnResult(out=out, logsum=m + float(np.log(denom)), maxscore=m)


def combine_partials(parts):
    """Merge split partials by log-sum-exp weighting of their denominators.

    Stable for logsums differing by far more than the fp64 exp range;
    the result is invariant to the order of ``parts``.
    """
    live = [p for p in parts if not p.empty]
    if not live:
        raise EmptySelectionError("empty selection")
    logsums = np.array([p.logsum for p in live], dtype=np.float64)
    m = logsums.max()
    w = np.exp(logsums - m)
    w /= w.sum()
    out = np.zeros_like(live[0].out, dtype=np.float64)
    for wi, p in zip(w, live):
        out += wi * p.out.astype(np.float64)
    return out.astype(np.float32)


def partition_blocks(mask: BlockMask, num_splits: int) -> list[BlockMask]:
    """Contiguous chunking of the selection into ceil(k/S)-sized splits.

    Trailing splits may be empty; they are kept so the split count is
    exactly ``num_splits``.
    """
    if num_splits < 1:
        raise ValueError("num_splits must be >= 1")
    k = len(mask.selected)
    chunk = -(-k // num_splits) if k else 0
    parts = []
    for s in range(num_splits):
        sel = mask.selected[s * chunk : (s + 1) * chunk] if chunk else ()
        parts.append(BlockMask(sel, mask.total_blocks))
    return parts
