"""Incremental-decoding micro-benchmarks: multi-query vs multi-head attention."""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, replace
from typing import List, Optional

import numpy as np

from .model import ModelConfig, WeightStore
from .session import LMState, advance


@dataclass(frozen=True)
class BenchResult:
    label: str
    attention: str
    batch: int
    cache_len: int
    iterations: int
    mean_s: float
    stddev_s: float
    median_s: float
    cache_bytes_per_token_per_layer: int

    def to_dict(self) -> dict:
        return asdict(self)


def cache_bytes_per_token_per_layer(cfg: ModelConfig, itemsize: int = 4) -> int:
    """Keys plus values for one position in one layer."""
    return 2 * cfg.n_kv_heads * cfg.head_dim * itemsize


def as_multihead(weights: WeightStore) -> WeightStore:
    """Multi-head copy of multi-query weights: the shared K/V head is replicated per query head.

    Both models compute identical outputs.
    """
    cfg = weights.cfg
    if cfg.attention == "multihead":
        return weights
    mh = replace(cfg, attention="multihead")
    tensors = dict(weights.tensors)
    for i in range(cfg.n_layers):
        for w in ("wk", "wv"):
            name = f"layers.{i}.attn.{w}"
            tensors[name] = np.tile(weights.tensors[name], (1, cfg.n_query_heads))
    return WeightStore(mh, tensors)


def build_states(weights: WeightStore, cfg: ModelConfig, batch: int, cache_len: int, seed: int = 0) -> List[LMState]:
    """``batch`` distinct histories of ``cache_len`` tokens sharing a common prefix."""
    rng = np.random.default_rng(seed)
    content = rng.integers(0, cfg.n_content, cache_len)
    prefix = [cfg.bos_id] + content[: cache_len - 2].tolist()
    _, shared = advance(LMState(), weights, cfg, prefix)
    tails = rng.integers(0, cfg.n_content, batch)
    return [advance(shared, weights, cfg, [int(t)])[1] for t in tails]


def bench_incremental(
    weights: WeightStore,
    cfg: ModelConfig,
    attention_variant: str,
    batch: int = 25,
    cache_len: int = 500,
    iterations: int = 10,
    warmup: int = 2,
    seed: int = 0,
) -> BenchResult:
    """Time one decoding step: every sequence in the batch advances by one token."""
    iterations = max(iterations, 10)
    if attention_variant != cfg.attention:
        if attention_variant != "multihead":
            raise ValueError("only multi-query weights can be converted (to multihead)")
        weights = as_multihead(weights)
        cfg = weights.cfg
    states = build_states(weights, cfg, batch, cache_len, seed)
    tokens = np.random.default_rng(seed + 1).integers(0, cfg.n_content, batch).tolist()
    times = []
    for it in range(warmup + iterations):
        t0 = time.perf_counter()
        for st, tok in zip(states, tokens):
            advance(st, weights, cfg, [tok])
        dt = time.perf_counter() - t0
        if it >= warmup:
            times.append(dt)
    return BenchResult(
        label=f"{attention_variant}-b{batch}-c{cache_len}",
        attention=attention_variant,
        batch=batch,
        cache_len=cache_len,
        iterations=iterations,
        mean_s=statistics.fmean(times),
        stddev_s=statistics.pstdev(times),
        median_s=statistics.median(times),
        cache_bytes_per_token_per_layer=cache_bytes_per_token_per_layer(cfg),
    )
