"""Per-block min/max key descriptors, block scoring and dynamic top-n selection.

A block descriptor summarizes up to ``b`` consecutive cached keys by
their elementwise minimum and maximum.  The score of a block against a
group-pooled query is an upper bound on the dot product the query can
achieve with any key inside the block's bounding box, which makes
descending-score selection a sound retrieval heuristic.

Convention on sparsity: ``SparsityConfig.sparsity`` is the fraction of
context EXCLUDED from sparse attention (0.9 means "attend ~10% of
blocks").  The active ratio used by the top-n rule and the memory model
is ``1 - sparsity``.  Published descriptions use one symbol for both
quantities; this codebase always stores the exclusion fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .attention import BlockMask


class BlockFullError(ValueError):
    pass


@dataclass(frozen=True)
class BlockDescriptor:
    kmin: np.ndarray
    kmax: np.ndarray
    fill: int


@dataclass(frozen=True)
class SparsityConfig:
    """Knobs of the sparse decoding loop.

    block_size: tokens per KV block.
    sparsity: fraction of context not attended, in [0, 1).
    n_min: floor on the number of selected blocks.
    n_local: most-recent blocks always force-included.
    rectify_freq: decode steps between dense rectifications.
    dense_prefix_layers: leading layers that always attend densely.
    """

    block_size: int = 16
    sparsity: float = 0.9
    n_min: int = 16
    n_local: int = 1
    rectify_freq: int = 32
    dense_prefix_layers: int = 0

    def __post_init__(self):
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")
        if not (0.0 <= self.sparsity < 1.0):
            raise ValueError("sparsity must be in [0, 1)")
        if not (self.n_min >= self.n_local >= 1):
            raise ValueError("need n_min >= n_local >= 1")
        if self.rectify_freq < 1:
            raise ValueError("rectify_freq must be >= 1")
        if self.dense_prefix_layers < 0:
            raise ValueError("dense_prefix_layers must be >= 0")

    @property
    def active_ratio(self) -> float:
        return 1.0 - self.sparsity


def build_descriptors(keys, block_size) -> list[BlockDescriptor]:
    """Batch-build descriptors for a key sequence; the last may be partial."""
    keys = np.asarray(keys, dtype=np.float32)
    if keys.shape[0] == 0:
        raise ValueError("keys must be non-empty")
    descs = []
    for lo in range(0, keys.shape[0], block_size):
        blk = keys[lo : lo + block_size]
        descs.append(
            BlockDescriptor(kmin=blk.min(axis=0), kmax=blk.max(axis=0), fill=blk.shape[0])
        )
    return descs


def update_descriptor(desc: BlockDescriptor, new_key, block_size) -> BlockDescriptor:
    """Fold one more key into a non-full block's min/max bounds."""
    if desc.fill >= block_size:
        raise BlockFullError("block full")
    new_key = np.asarray(new_key, dtype=np.float32)
    return replace(
        desc,
        kmin=np.minimum(desc.kmin, new_key),
        kmax=np.maximum(desc.kmax, new_key),
        fill=desc.fill + 1,
    )


def pool_queries(group_queries) -> np.ndarray:
    """Arithmetic mean of the query heads in one GQA group."""
    return np.mean(np.atleast_2d(np.asarray(group_queries, dtype=np.float32)), axis=0)


def score_block(q, desc: BlockDescriptor) -> float:
    """Upper bound on q . k over keys k inside the descriptor's box."""
    q = np.asarray(q, dtype=np.float32)
    return float(np.maximum(q * desc.kmax, q * desc.kmin).sum(dtype=np.float64))


def score_blocks(q, kmin, kmax) -> np.ndarray:
    """Vectorized `score_block` over stacked [M, d] descriptor arrays."""
    q = np.asarray(q, dtype=np.float64)
    lo = np.asarray(kmin, dtype=np.float64) * q
    hi = np.asarray(kmax, dtype=np.float64) * q
    return np.maximum(lo, hi).sum(axis=1)


def selection_size(total_blocks: int, cfg: SparsityConfig) -> int:
    """Dynamic top-n: max(n_min, ceil(M * active_ratio)), clamped to M."""
    n = max(cfg.n_min, math.ceil(total_blocks * cfg.active_ratio))
    return min(total_blocks, n)


def select_blocks(q, descs, cfg: SparsityConfig) -> BlockMask:
    """Pick the attended block set for one pooled query.

    The ``n_local`` most recent blocks are always included; the rest are
    filled in descending score order, ties broken by lower block index.
    """
    if isinstance(descs, tuple):
        kmin, kmax = descs
    else:
        if not descs:
            raise ValueError("descs must be non-empty")
        kmin = np.stack([d.kmin for d in descs])
        kmax = np.stack([d.kmax for d in descs])
    return select_blocks_scored(score_blocks(q, kmin, kmax), kmin.shape[0], cfg)


def select_blocks_scored(scores: np.ndarray, total_blocks: int, cfg: SparsityConfig) -> BlockMask:
    n = selection_size(total_blocks, cfg)
    n_forced = min(cfg.n_local, n)
    forced_start = total_blocks - n_forced
    take = n - n_forced
    if take > 0:
        cand = scores[:forced_start]
        # lexsort: primary descending score, secondary ascending index
        order = np.lexsort((np.arange(cand.shape[0]), -cand))[:take]
        sel = np.concatenate([np.sort(order), np.arange(forced_start, total_blocks)])
    else:
        sel = np.arange(forced_start, total_blocks)
    return BlockMask(tuple(int(i) for i in sel), total_blocks)
