"""Rectified block-sparse attention decoding, CPU reference implementation."""

from .attention import (BlockMask, EmptyContextError, EmptySelectionError,
                        PartialAttnResult, combine_partials, dense_attention,
                        group_block_sparse_attention, partial_attention,
                        partition_blocks)
from .block_index import (BlockDescriptor, BlockFullError, SparsityConfig,
                          build_descriptors, pool_queries, score_block,
                          score_blocks, select_blocks, selection_size,
                          update_descriptor)
from .decoder import (DecodeResult, DecodeState, DriftEntry, DriftTrace, decode,
                      default_probe_steps, drift_probe)
from .kv_cache import (MemCounters, MemReport, PagedKvCache,
                       RectifyAlignmentError, charge_and_report,
                       predicted_access_ratio)
from .model import (BOS, EOS, ModelConfig, ModelWeights, dense_forward_batch,
                    dense_logits_all, generate_weights, greedy_token,
                    load_weights, oracle_cache, prefill, save_weights,
                    sparse_forward)

__version__ = "0.1.0"
