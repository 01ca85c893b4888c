"""CTC prefix beam search with transformer-LM shallow fusion.

Each hypothesis tracks blank/non-blank path masses for its collapsed prefix.
Per frame, a candidate token either

* is blank or repeats the prefix's last symbol directly, extending the path
  mass with no LM cost, or
* emits a new token, which adds ``alpha * log P_LM(token | prefix) + beta``.

The LM contribution depends only on the collapsed prefix, so it is stored
once per prefix and added to ``logaddexp(p_blank, p_nonblank)`` when ranking.

AM posteriors put content tokens at the same ids as the LM (``0 .. C-1``)
with blank as the last column (id ``C``).
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, SchemaError, ValidationError
from .model import ModelConfig, WeightStore
from .numerics import logaddexp
from .session import LMState, advance, carry_context, content_log_probs, next_token_log_probs, start_state

NEG_INF = -math.inf


@dataclass(frozen=True, eq=False)
class AMPosterior:
    utterance_id: str
    log_probs: np.ndarray  # (T, am_vocab) log-softmax rows
    blank_id: int = -1

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        if lp.ndim != 2:
            raise SchemaError(f"posterior must be 2-D, got shape {lp.shape}")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)
        if self.blank_id < 0:
            object.__setattr__(self, "blank_id", lp.shape[1] - 1)

    @property
    def T(self) -> int:
        return self.log_probs.shape[0]

    @property
    def am_vocab(self) -> int:
        return self.log_probs.shape[1]

    def validate(self, tol: float = 1e-4) -> "AMPosterior":
        sums = np.exp(self.log_probs).sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > tol)
        if bad.size:
            raise ValidationError(
                f"{self.utterance_id}: frame {int(bad[0])} sums to {sums[bad[0]]:.6f}, not 1"
            )
        return self


@dataclass(frozen=True)
class FusionParams:
    alpha: float = 0.5
    beta_bonus: float = 0.3
    cutoff: float = -8.0
    beam_width: int = 25

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if not self.cutoff < 0:
            raise ValueError("cutoff must be negative")


class _LMNode:
    """Lazily evaluated LM state for one collapsed prefix."""

    __slots__ = ("parent", "token", "_state", "_logprobs")

    def __init__(self, parent: Optional["_LMNode"], token: Optional[int], state: Optional[LMState] = None):
        self.parent = parent
        self.token = token
        self._state = state
        self._logprobs = None

    def state(self, lm: "_LMContext") -> LMState:
        if self._state is None:
            logits, self._state = advance(self.parent.state(lm), lm.weights, lm.cfg, [self.token])
            self._logprobs = content_log_probs(logits[-1], lm.cfg)
            lm.advances += 1
        return self._state

    def logprobs(self, lm: "_LMContext") -> np.ndarray:
        if self._logprobs is None:
            if self.parent is None:
                self._logprobs = next_token_log_probs(self._state, lm.weights, lm.cfg)
            else:
                self.state(lm)
        return self._logprobs


@dataclass
class _LMContext:
    weights: WeightStore
    cfg: ModelConfig
    advances: int = 0


@dataclass(eq=False)
class Hypothesis:
    prefix: Tuple[int, ...]
    log_p_blank: float
    log_p_nonblank: float
    lm_score: float
    _node: _LMNode = field(repr=False)
    _lm: _LMContext = field(repr=False)

    @property
    def am_score(self) -> float:
        return logaddexp(self.log_p_blank, self.log_p_nonblank)

    @property
    def score(self) -> float:
        return self.am_score + self.lm_score

    @property
    def lm_state(self) -> LMState:
        return self._node.state(self._lm)

    @property
    def next_token_logprobs(self) -> np.ndarray:
        return self._node.logprobs(self._lm)


def lm_token_score(token: int, prev_token: Optional[int], lm_logprob: float, p: FusionParams,
                   blank_id: Optional[int] = None) -> float:
    """LM contribution of one frame-level symbol: zero for blanks and frame repeats."""
    if token == blank_id or token == prev_token:
        return 0.0
    return p.alpha * lm_logprob + p.beta_bonus


def frame_candidates(row, cutoff: float) -> np.ndarray:
    row = np.asarray(row)
    return np.flatnonzero(row >= row.max() + cutoff)


def greedy_decode(log_probs, blank_id: Optional[int] = None) -> List[int]:
    lp = np.asarray(log_probs)
    blank = lp.shape[1] - 1 if blank_id is None else blank_id
    out, prev = [], None
    for s in lp.argmax(axis=1).tolist():
        if s != prev and s != blank:
            out.append(s)
        prev = s
    return out


def _rank_key(item):
    prefix, score = item
    return (-score, -len(prefix), prefix)


def decode_utterance(
    post: AMPosterior,
    weights: WeightStore,
    cfg: ModelConfig,
    p: FusionParams,
    context: Optional[LMState] = None,
    stats: Optional[dict] = None,
) -> List[Hypothesis]:
    """Prefix beam search over one utterance; hypotheses best first.

    ``context`` is the LM history to continue from (BOS-only when omitted).
    Each hypothesis exposes its final LM state through ``lm_state``.
    Pass a dict as ``stats`` to receive the number of LM advances.
    """
    if post.T == 0:
        raise InputError(f"{post.utterance_id}: empty posterior")
    if post.am_vocab != cfg.n_content + 1 or post.blank_id != post.am_vocab - 1:
        raise SchemaError(
            f"{post.utterance_id}: posterior has {post.am_vocab} columns (blank {post.blank_id}); "
            f"model expects {cfg.n_content} content tokens + trailing blank"
        )
    lm = _LMContext(weights, cfg)
    root = _LMNode(None, None, context if context is not None else start_state(weights, cfg))
    hyps = prefix_beam_search(post, p, lm, root)
    if stats is not None:
        stats["lm_advances"] = lm.advances
    return hyps


def prefix_beam_search(
    post: AMPosterior,
    p: FusionParams,
    lm: Optional[_LMContext] = None,
    root: Optional[_LMNode] = None,
) -> List[Hypothesis]:
    """Core search. Without ``lm`` (or with alpha=0) no LM is consulted."""
    if post.T == 0:
        raise InputError(f"{post.utterance_id}: empty posterior")
    use_lm = p.alpha != 0.0
    if use_lm and lm is None:
        raise InputError("LM fusion requested without a language model")
    root = root if root is not None else _LMNode(None, None)
    blank = post.blank_id

    nodes: Dict[tuple, _LMNode] = {(): root}
    lm_scores: Dict[tuple, float] = {(): 0.0}
    beams: Dict[tuple, List[float]] = {(): [0.0, NEG_INF]}

    def extend(prefix, c):
        # only called for tokens that start a new collapsed symbol
        new = prefix + (c,)
        if new not in lm_scores:
            lp = float(nodes[prefix].logprobs(lm)[c]) if use_lm else 0.0
            nodes[new] = _LMNode(nodes[prefix], c)
            lm_scores[new] = lm_scores[prefix] + lm_token_score(c, None, lp, p, blank)
        return new

    for row in post.log_probs:
        cands = frame_candidates(row, p.cutoff).tolist()
        row = row.tolist()
        nxt: Dict[tuple, List[float]] = {}
        for prefix, (pb, pnb) in beams.items():
            total = logaddexp(pb, pnb)
            last = prefix[-1] if prefix else None
            for c in cands:
                pc = row[c]
                if c == blank:
                    e = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
                    e[0] = logaddexp(e[0], total + pc)
                elif c == last:
                    e = nxt.setdefault(prefix, [NEG_INF, NEG_INF])
                    e[1] = logaddexp(e[1], pnb + pc)
                    if pb != NEG_INF:
                        new = extend(prefix, c)
                        e = nxt.setdefault(new, [NEG_INF, NEG_INF])
                        e[1] = logaddexp(e[1], pb + pc)
                else:
                    new = extend(prefix, c)
                    e = nxt.setdefault(new, [NEG_INF, NEG_INF])
                    e[1] = logaddexp(e[1], total + pc)
        scored = [(pre, logaddexp(*m) + lm_scores[pre]) for pre, m in nxt.items()]
        scored = [item for item in scored if item[1] != NEG_INF]
        scored.sort(key=_rank_key)
        beams = {pre: nxt[pre] for pre, _ in scored[: p.beam_width]}

    ranked = sorted(((pre, logaddexp(*m) + lm_scores[pre]) for pre, m in beams.items()), key=_rank_key)
    return [
        Hypothesis(pre, beams[pre][0], beams[pre][1], lm_scores[pre], nodes[pre], lm)
        for pre, _ in ranked
    ]


@dataclass(frozen=True)
class UtteranceInput:
    utterance_id: str
    posterior: AMPosterior
    reference_tokens: Optional[Tuple[int, ...]] = None
    start_s: float = 0.0
    end_s: float = 0.0


@dataclass(frozen=True)
class UtteranceResult:
    utterance_id: str
    tokens: Tuple[int, ...]
    score: float


HISTORY_MODES = ("decoded", "gth")


def check_order(utterances: Sequence[UtteranceInput]) -> None:
    for a, b in zip(utterances, utterances[1:]):
        if b.start_s < a.start_s:
            raise InputError(f"utterance {b.utterance_id} starts before {a.utterance_id}")


def decode_conversation(
    utterances: Sequence[UtteranceInput],
    weights: WeightStore,
    cfg: ModelConfig,
    p: FusionParams,
    max_context_tokens: int,
    history_mode: str = "decoded",
    max_gap_seconds: Optional[float] = None,
) -> List[UtteranceResult]:
    """Decode a conversation in order, passing the top beam's history forward.

    In ``"gth"`` mode the carried history is the reference transcript
    instead of the decoded one. ``max_context_tokens=0`` decodes every
    utterance independently from a BOS-only history.
    """
    if history_mode not in HISTORY_MODES:
        raise InputError(f"unknown history mode {history_mode!r}")
    if max_context_tokens < 0:
        raise InputError("max_context_tokens must be >= 0")
    check_order(utterances)
    fresh = start_state(weights, cfg)
    context = fresh
    prev_end = None
    results = []
    for utt in utterances:
        if max_context_tokens == 0:
            context = fresh
        elif max_gap_seconds is not None and prev_end is not None and utt.start_s - prev_end > max_gap_seconds:
            context = fresh
        hyps = decode_utterance(utt.posterior, weights, cfg, p, context)
        best = hyps[0]
        results.append(UtteranceResult(utt.utterance_id, best.prefix, best.score))
        prev_end = utt.end_s
        if max_context_tokens == 0:
            continue
        if history_mode == "decoded":
            state = best.lm_state
        else:
            if utt.reference_tokens is None:
                raise InputError(f"{utt.utterance_id}: ground-truth history needs a reference")
            ref = list(utt.reference_tokens)
            state = advance(context, weights, cfg, ref)[1] if ref else context
        context = carry_context(state, weights, cfg, max_context_tokens)
    return results


def _decode_job(args):
    return decode_conversation(*args[0], **args[1])


def decode_corpus(
    conversations: Sequence[Sequence[UtteranceInput]],
    weights: WeightStore,
    cfg: ModelConfig,
    p: FusionParams,
    max_context_tokens: int,
    history_mode: str = "decoded",
    max_gap_seconds: Optional[float] = None,
    workers: int = 1,
) -> List[List[UtteranceResult]]:
    """Decode conversations independently; results keep input order."""
    jobs = [
        ((conv, weights, cfg, p, max_context_tokens),
         dict(history_mode=history_mode, max_gap_seconds=max_gap_seconds))
        for conv in conversations
    ]
    if workers <= 1 or len(jobs) <= 1:
        return [_decode_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_decode_job, jobs))
