"""Decoder-only transformer LM with key-query normalised multi-query attention.

Layout per layer (pre-norm)::

    x = x + Wo · Attn(LN1(x))
    x = x + SwiGLU(LN2(x))

Attention L2-normalises queries (per head) and keys, scales the cosine
similarities by a learnt per-layer scalar ``g``, adds a relative position
bias produced by a small MLP over the signed distance ``j - i`` and applies
the causal mask before the softmax. Keys and values use a single shared head
("multiquery"); a ``"multihead"`` variant with one K/V head per query head is
kept for benchmarking.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import SchemaError, ShapeError, StateError, VocabError

LN_EPS = 1e-5
ATTENTION_VARIANTS = ("multiquery", "multihead")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 12
    d_model: int = 256
    n_query_heads: int = 8
    ffn_expansion: int = 4
    vocab_size: int = 130
    pos_bias_hidden: int = 32
    eps_norm: float = 1e-6
    attention: str = "multiquery"

    def __post_init__(self):
        for name in ("n_layers", "d_model", "n_query_heads", "ffn_expansion", "pos_bias_hidden"):
            if getattr(self, name) < 1:
                raise SchemaError(f"{name} must be >= 1")
        if self.d_model % self.n_query_heads:
            raise SchemaError("d_model must be a multiple of n_query_heads")
        if self.vocab_size < 4:
            raise SchemaError("vocab_size must be >= 4 (BOS, SEP and two content tokens)")
        if self.eps_norm <= 0:
            raise SchemaError("eps_norm must be positive")
        if self.attention not in ATTENTION_VARIANTS:
            raise SchemaError(f"unknown attention variant {self.attention!r}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_query_heads

    @property
    def n_kv_heads(self) -> int:
        return 1 if self.attention == "multiquery" else self.n_query_heads

    @property
    def bos_id(self) -> int:
        return self.vocab_size - 2

    @property
    def sep_id(self) -> int:
        return self.vocab_size - 1

    @property
    def n_content(self) -> int:
        return self.vocab_size - 2

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        params = dict(n_layers=2, d_model=32, n_query_heads=4, vocab_size=16)
        params.update(overrides)
        return cls(**params)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            return cls(**d)
        except TypeError as exc:
            raise SchemaError(f"bad model config: {exc}") from None


def weight_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered tensor schema implied by ``cfg``."""
    d, v, hd = cfg.d_model, cfg.vocab_size, cfg.head_dim
    kv = cfg.n_kv_heads * hd
    inner = cfg.ffn_expansion * d
    h = cfg.pos_bias_hidden
    shapes: Dict[str, Tuple[int, ...]] = {"embed": (v, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, kv), p + "attn.wv": (d, kv),
            p + "attn.wo": (d, d), p + "attn.g": (1,),
            p + "pos.w1": (1, h), p + "pos.b1": (h,),
            p + "pos.w2": (h, cfg.n_query_heads), p + "pos.b2": (cfg.n_query_heads,),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.gate": (d, inner), p + "ffn.up": (d, inner), p + "ffn.down": (inner, d),
        })
    shapes.update({
        "final_ln.gain": (d,), "final_ln.bias": (d,),
        "out": (d, v),
        "init.gamma": (v,), "init.beta": (v,),
    })
    return shapes


class WeightStore:
    """Immutable named float32 tensors plus float64 working copies.

    The relative-position-bias tables are memoised per layer; they are a
    pure function of the weights so the memo does not affect results.
    """

    def __init__(self, cfg: ModelConfig, tensors: Dict[str, np.ndarray]):
        expected = weight_shapes(cfg)
        missing = [n for n in expected if n not in tensors]
        if missing:
            raise SchemaError(f"missing tensor {missing[0]!r}")
        extra = [n for n in tensors if n not in expected]
        if extra:
            raise SchemaError(f"unexpected tensor {extra[0]!r}")
        self.cfg = cfg
        self.tensors: Dict[str, np.ndarray] = {}
        self._f64: Dict[str, np.ndarray] = {}
        for name, shape in expected.items():
            arr = np.ascontiguousarray(tensors[name], dtype=np.float32)
            if arr.shape != shape:
                raise SchemaError(f"tensor {name!r} has shape {arr.shape}, expected {shape}")
            arr.setflags(write=False)
            self.tensors[name] = arr
            w = arr.astype(np.float64)
            w.setflags(write=False)
            self._f64[name] = w
        self._layers = []
        for i in range(cfg.n_layers):
            p = f"layers.{i}."
            self._layers.append({n[len(p):]: w for n, w in self._f64.items() if n.startswith(p)})
        self._pos_tables: Dict[int, np.ndarray] = {}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._f64[name]

    def __eq__(self, other) -> bool:
        if not isinstance(other, WeightStore):
            return NotImplemented
        return self.cfg == other.cfg and all(
            np.array_equal(a, other.tensors[n]) for n, a in self.tensors.items()
        )

    def layer(self, i: int) -> Dict[str, np.ndarray]:
        return self._layers[i]

    def position_table(self, layer: int, n: int) -> np.ndarray:
        """Bias for distances 0, -1, ..., -(n-1): array (n, n_query_heads)."""
        table = self._pos_tables.get(layer)
        if table is None or table.shape[0] < n:
            size = max(n, 64 if table is None else 2 * table.shape[0])
            table = position_bias(self.layer(layer), -np.arange(size, dtype=np.float64))
            table.setflags(write=False)
            self._pos_tables[layer] = table
        return table[:n]


def position_bias(lw: Dict[str, np.ndarray], distances) -> np.ndarray:
    """Dynamic position bias: MLP over signed log-scaled distance -> per-head bias."""
    d = np.asarray(distances, dtype=np.float64).reshape(-1, 1)
    feat = np.sign(d) * np.log1p(np.abs(d))
    hidden = nx.silu(nx.matmul(feat, lw["pos.w1"]) + lw["pos.b1"])
    return nx.matmul(hidden, lw["pos.w2"]) + lw["pos.b2"]


def generate_weights(seed: int, cfg: ModelConfig) -> WeightStore:
    """Deterministic random weights for tests and fixtures.

    Uses numpy's PCG64 generator seeded with ``seed`` and draws tensors in
    schema order. Matrices are N(0, 1/d_model); layer-norm gains are 1 and
    biases 0; ``g`` is 4 + 0.5·N(0,1); the position MLP input layer is
    N(0,1) with N(0, 0.25) bias; ``init.gamma`` is 1 + 0.1·N(0,1) and
    ``init.beta`` is 0.1·N(0,1).
    """
    rng = np.random.default_rng(seed)
    scale = 1.0 / math.sqrt(cfg.d_model)
    tensors = {}
    for name, shape in weight_shapes(cfg).items():
        key = name.split(".", 2)[2] if name.startswith("layers.") else name
        if key.endswith("ln1.gain") or key.endswith("ln2.gain") or key == "final_ln.gain":
            w = np.ones(shape)
        elif key in ("ln1.bias", "ln2.bias", "final_ln.bias"):
            w = np.zeros(shape)
        elif key == "attn.g":
            w = 4.0 + 0.5 * rng.standard_normal(shape)
        elif key == "pos.w1":
            w = rng.standard_normal(shape)
        elif key == "pos.b1":
            w = 0.5 * rng.standard_normal(shape)
        elif key == "pos.w2":
            w = rng.standard_normal(shape) / math.sqrt(cfg.pos_bias_hidden)
        elif key == "pos.b2":
            w = np.zeros(shape)
        elif key == "init.gamma":
            w = 1.0 + 0.1 * rng.standard_normal(shape)
        elif key == "init.beta":
            w = 0.1 * rng.standard_normal(shape)
        else:
            w = scale * rng.standard_normal(shape)
        tensors[name] = w.astype(np.float32)
    return WeightStore(cfg, tensors)


def swiglu_ffn(x, lw: Dict[str, np.ndarray]) -> np.ndarray:
    return nx.matmul(nx.silu(nx.matmul(x, lw["ffn.gate"])) * nx.matmul(x, lw["ffn.up"]), lw["ffn.down"])


def attention_layer(
    x,
    lw: Dict[str, np.ndarray],
    cfg: ModelConfig,
    pos_table: np.ndarray,
    cache: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One self-attention sub-layer.

    ``x`` is (T_new, d_model); ``cache`` holds previously computed normalised
    keys and values, each (T_old, n_kv_heads, head_dim). ``pos_table`` must
    cover at least T_old + T_new distances. Returns the projected output and
    the extended key and value arrays.
    """
    x = nx.as_matrix(x)
    t_new = x.shape[0]
    h, hd, kvh = cfg.n_query_heads, cfg.head_dim, cfg.n_kv_heads
    if x.shape[1] != cfg.d_model:
        raise ShapeError(f"attention input has width {x.shape[1]}, expected {cfg.d_model}")

    q = nx.l2_normalize_rows(nx.matmul(x, lw["attn.wq"]).reshape(t_new, h, hd), cfg.eps_norm)
    k = nx.l2_normalize_rows(nx.matmul(x, lw["attn.wk"]).reshape(t_new, kvh, hd), cfg.eps_norm)
    v = nx.matmul(x, lw["attn.wv"]).reshape(t_new, kvh, hd)
    if cache is not None:
        past_k, past_v = cache
        if past_k.shape[1:] != (kvh, hd) or past_k.shape != past_v.shape:
            raise StateError(f"cached keys {past_k.shape} do not fit a {cfg.attention} layer")
        k = np.concatenate([past_k, k])
        v = np.concatenate([past_v, v])
    t_all = k.shape[0]
    t_old = t_all - t_new

    # (H, T_new, hd) @ (kvh, hd, T_all) broadcasts kvh=1 over the query heads
    sim = lw["attn.g"][0] * np.matmul(q.transpose(1, 0, 2), k.transpose(1, 2, 0))
    q_pos = np.arange(t_old, t_all)[:, None]
    k_pos = np.arange(t_all)[None, :]
    back = q_pos - k_pos
    bias = pos_table[np.maximum(back, 0)].transpose(2, 0, 1)
    logits = np.where(back[None] < 0, nx.NEG_INF, sim + bias)
    weights = nx.softmax_rows(logits)
    mixed = np.matmul(weights, v.transpose(1, 0, 2))  # (H, T_new, hd)
    out = nx.matmul(mixed.transpose(1, 0, 2).reshape(t_new, cfg.d_model), lw["attn.wo"])
    return out, k, v


KVCache = List[Tuple[np.ndarray, np.ndarray]]


def check_tokens(cfg: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        bad = int(ids[(ids < 0) | (ids >= cfg.vocab_size)][0])
        raise VocabError(f"token id {bad} outside vocabulary of size {cfg.vocab_size}")
    return ids


def forward(
    weights: WeightStore,
    cfg: ModelConfig,
    tokens: Sequence[int],
    past: Optional[KVCache] = None,
) -> Tuple[np.ndarray, KVCache]:
    """Run ``tokens`` through the model on top of an optional key/value history."""
    ids = check_tokens(cfg, tokens)
    if ids.size == 0:
        raise ShapeError("forward needs at least one token")
    if past is not None and len(past) != cfg.n_layers:
        raise StateError(f"cache has {len(past)} layers, model has {cfg.n_layers}")
    t_old = 0 if not past else past[0][0].shape[0]
    t_all = t_old + ids.size

    x = weights["embed"][ids]
    new_cache: KVCache = []
    for i in range(cfg.n_layers):
        lw = weights.layer(i)
        a, k, v = attention_layer(
            nx.layer_norm(x, lw["ln1.gain"], lw["ln1.bias"], LN_EPS),
            lw, cfg, weights.position_table(i, t_all),
            None if not past else past[i],
        )
        x = x + a
        x = x + swiglu_ffn(nx.layer_norm(x, lw["ln2.gain"], lw["ln2.bias"], LN_EPS), lw)
        new_cache.append((k, v))
    x = nx.layer_norm(x, weights["final_ln.gain"], weights["final_ln.bias"], LN_EPS)
    return nx.matmul(x, weights["out"]), new_cache


def forward_full(weights: WeightStore, cfg: ModelConfig, tokens: Sequence[int]) -> np.ndarray:
    """Next-token logits (T, vocab_size) for every prefix of ``tokens``."""
    return forward(weights, cfg, tokens)[0]
