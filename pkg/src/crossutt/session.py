"""Cross-utterance LM state: cached keys/values, SEP boundaries, first-token prediction.

States are immutable values. ``advance`` returns a new state and never
touches its input, so beams can branch from a shared parent freely.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np

from . import numerics as nx
from .errors import StateError
from .model import ModelConfig, WeightStore, check_tokens, forward


@dataclass(frozen=True)
class SpecialTokens:
    bos: int
    sep: int

    def __post_init__(self):
        if self.bos == self.sep:
            raise ValueError("BOS and SEP must differ")

    @classmethod
    def for_config(cls, cfg: ModelConfig) -> "SpecialTokens":
        return cls(bos=cfg.bos_id, sep=cfg.sep_id)


@dataclass(frozen=True, eq=False)
class LMState:
    """KV cache for one token history.

    ``keys``/``values`` hold one (T_cache, n_kv_heads, head_dim) array per
    layer. ``last_logits`` are the logits at the most recent position.
    ``at_boundary`` is set when the most recent token was SEP, in which case
    the next token is predicted by the initial-token head instead of the
    plain next-token distribution.
    """

    keys: Tuple[np.ndarray, ...] = ()
    values: Tuple[np.ndarray, ...] = ()
    tokens: Tuple[int, ...] = ()
    bos_present: bool = False
    last_logits: Optional[np.ndarray] = None
    at_boundary: bool = False

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def empty(self) -> bool:
        return not self.tokens

    def cache_bytes(self, itemsize: int = 4) -> int:
        return sum(k.size + v.size for k, v in zip(self.keys, self.values)) * itemsize


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


def advance(
    state: LMState, weights: WeightStore, cfg: ModelConfig, tokens: Sequence[int]
) -> Tuple[np.ndarray, LMState]:
    """Feed ``tokens`` after the cached history.

    Returns the logits for each new position (len(tokens), vocab_size) and
    the extended state.
    """
    ids = check_tokens(cfg, tokens)
    if ids.size == 0:
        raise StateError("advance needs at least one token")
    past = list(zip(state.keys, state.values)) if not state.empty else None
    logits, cache = forward(weights, cfg, ids, past)
    new_tokens = state.tokens + tuple(int(t) for t in ids)
    return logits, LMState(
        keys=tuple(_frozen(k) for k, _ in cache),
        values=tuple(_frozen(v) for _, v in cache),
        tokens=new_tokens,
        bos_present=new_tokens[0] == cfg.bos_id,
        last_logits=_frozen(logits[-1].copy()),
        at_boundary=False,
    )


def start_state(weights: WeightStore, cfg: ModelConfig) -> LMState:
    """Fresh history holding only BOS."""
    return advance(LMState(), weights, cfg, [cfg.bos_id])[1]


def truncate(state: LMState, max_tokens: int) -> LMState:
    """Keep at most ``max_tokens`` cached positions, always retaining a leading BOS."""
    if max_tokens < 1:
        raise ValueError("max_tokens must be >= 1")
    n = len(state)
    if n <= max_tokens:
        return state
    if state.bos_present:
        idx = np.concatenate([[0], np.arange(n - max_tokens + 1, n)])
    else:
        idx = np.arange(n - max_tokens, n)
    return replace(
        state,
        keys=tuple(_frozen(k[idx]) for k in state.keys),
        values=tuple(_frozen(v[idx]) for v in state.values),
        tokens=tuple(state.tokens[i] for i in idx),
    )


def end_utterance(
    state: LMState, weights: WeightStore, cfg: ModelConfig, toks: Optional[SpecialTokens] = None
) -> LMState:
    """Append SEP. SEP is never scored; its logits seed the next utterance."""
    if state.empty:
        raise StateError("cannot close an utterance on an empty history")
    toks = toks or SpecialTokens.for_config(cfg)
    _, new = advance(state, weights, cfg, [toks.sep])
    return replace(new, at_boundary=True)


def carry_context(state: LMState, weights: WeightStore, cfg: ModelConfig, max_tokens: int) -> LMState:
    """Close the utterance with SEP and cut the history to ``max_tokens``."""
    return truncate(end_utterance(state, weights, cfg), max_tokens)


def initial_token_distribution(state: LMState, gamma, beta) -> np.ndarray:
    """softmax(last_logits * gamma + beta) over the full LM vocabulary."""
    if state.last_logits is None:
        raise StateError("state has no logits to modulate")
    return nx.softmax_rows(state.last_logits * np.asarray(gamma) + np.asarray(beta))


def content_log_probs(logits, cfg: ModelConfig) -> np.ndarray:
    """Log-softmax over content tokens only; BOS and SEP get ``-inf``."""
    masked = np.array(logits, dtype=np.float64)
    masked[..., cfg.bos_id] = nx.NEG_INF
    masked[..., cfg.sep_id] = nx.NEG_INF
    return nx.log_softmax_rows(masked)


def next_token_log_probs(state: LMState, weights: WeightStore, cfg: ModelConfig) -> np.ndarray:
    """Distribution over the next content token given ``state``.

    After a SEP boundary this is the initial-token head applied to the SEP
    logits; otherwise the plain next-token prediction. Both are restricted to
    the content vocabulary and renormalised.
    """
    if state.last_logits is None:
        raise StateError("state has no logits; start it with BOS")
    logits = state.last_logits
    if state.at_boundary:
        logits = logits * weights["init.gamma"] + weights["init.beta"]
    return content_log_probs(logits, cfg)


def sequence_log_prob(
    state: LMState, weights: WeightStore, cfg: ModelConfig, tokens: Sequence[int]
) -> Tuple[float, LMState]:
    """Sum of content log-probs of ``tokens`` following ``state``; returns the advanced state."""
    if len(tokens) == 0:
        return 0.0, state
    first = next_token_log_probs(state, weights, cfg)
    logits, new = advance(state, weights, cfg, tokens)
    total = float(first[tokens[0]])
    if len(tokens) > 1:
        rows = content_log_probs(logits[:-1], cfg)
        total += float(rows[np.arange(len(tokens) - 1), np.asarray(tokens[1:])].sum())
    return total, new
