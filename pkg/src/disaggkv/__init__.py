"""Disaggregated base/residual KV cache for multi-LoRA agent serving, at desk scale."""

from __future__ import annotations

from .attention import AttentionConfig, DisaggKeyValueBlocks, naive_attention_oracle, residual_attention
from .dual_radix import AgentCacheView, DualRadixTree, PartialHitPlan, RadixTree
from .engine import AgentRequest, Engine, EngineConfig, EngineMode, Metrics
from .kv_pool import BlockHandle, BlockPool, KVPools, NeedsEviction, PoolKind
from .lora import LoraAdapter, MemoryRatioInputs, Mode, ModelGeometry, memory_ratio
from .numerics import AttentionState, RopeTable, apply_rope, build_rope_table, matmul
from .workloads import Trace, TraceRecord, gen_trace, parse_trace, serialize_trace

__version__ = "0.1.0"

__all__ = [
    "AgentCacheView",
    "AgentRequest",
    "AttentionConfig",
    "AttentionState",
    "BlockHandle",
    "BlockPool",
    "DisaggKeyValueBlocks",
    "DualRadixTree",
    "Engine",
    "EngineConfig",
    "EngineMode",
    "KVPools",
    "LoraAdapter",
    "MemoryRatioInputs",
    "Metrics",
    "Mode",
    "ModelGeometry",
    "NeedsEviction",
    "PartialHitPlan",
    "PoolKind",
    "RadixTree",
    "RopeTable",
    "Trace",
    "TraceRecord",
    "apply_rope",
    "build_rope_table",
    "gen_trace",
    "matmul",
    "memory_ratio",
    "naive_attention_oracle",
    "parse_trace",
    "residual_attention",
    "serialize_trace",
]
