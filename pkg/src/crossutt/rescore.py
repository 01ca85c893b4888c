"""N-best generation and second-pass rescoring with the transformer LM."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .ctc import AMPosterior, FusionParams, UtteranceInput, check_order, prefix_beam_search
from .errors import InputError, SchemaError, StateError
from .model import ModelConfig, WeightStore
from .session import LMState, advance, carry_context, sequence_log_prob, start_state


@dataclass(frozen=True)
class NBestEntry:
    tokens: Tuple[int, ...]
    first_pass_score: float
    tlm_logprob: Optional[float] = None
    final_score: Optional[float] = None

    @property
    def length(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class NBestList:
    utterance_id: str
    entries: Tuple[NBestEntry, ...]

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.tokens in seen:
                raise InputError(f"{self.utterance_id}: duplicate hypothesis {e.tokens}")
            seen.add(e.tokens)

    def __len__(self):
        return len(self.entries)

    def to_json(self, vocab=None) -> str:
        hyps = []
        for e in self.entries:
            hyps.append({
                "tokens": list(e.tokens),
                "text": vocab.detokenize(e.tokens) if vocab is not None else None,
                "first_pass": e.first_pass_score,
                "tlm": e.tlm_logprob,
                "final": e.final_score,
            })
        return json.dumps({"utterance_id": self.utterance_id, "hyps": hyps})

    @classmethod
    def from_json(cls, line: str) -> "NBestList":
        d = json.loads(line)
        return cls(d["utterance_id"], tuple(
            NBestEntry(tuple(h["tokens"]), h["first_pass"], h.get("tlm"), h.get("final"))
            for h in d["hyps"]
        ))


@dataclass(frozen=True)
class RescoreParams:
    w_first: float = 1.0
    w_tlm: float = 1.0
    length_penalty: float = 0.0
    n_best_size: int = 100

    def __post_init__(self):
        if self.n_best_size < 1:
            raise ValueError("n_best_size must be >= 1")


def generate_nbest(post: AMPosterior, width: int, n: int, cutoff: float = -math.inf) -> NBestList:
    """Top ``n`` collapsed sequences from an AM-only beam search of ``width``.

    Entries are ranked by total CTC path mass, which is also their
    ``first_pass_score``. No LM is queried.
    """
    if width < n:
        raise InputError("beam width must be at least the n-best size")
    p = FusionParams(alpha=0.0, beta_bonus=0.0, cutoff=cutoff, beam_width=width)
    hyps = prefix_beam_search(post, p)
    return NBestList(post.utterance_id, tuple(NBestEntry(h.prefix, h.am_score) for h in hyps[:n]))


def tlm_score_nbest(nbest: NBestList, weights: WeightStore, cfg: ModelConfig,
                    context: Optional[LMState] = None) -> NBestList:
    """Fill ``tlm_logprob`` for every entry given the LM history ``context``."""
    context = context if context is not None else start_state(weights, cfg)
    out = []
    for e in nbest.entries:
        if e.tokens and max(e.tokens) >= cfg.n_content:
            raise SchemaError(f"{nbest.utterance_id}: token id {max(e.tokens)} is not a content token")
        lp, _ = sequence_log_prob(context, weights, cfg, list(e.tokens))
        out.append(replace(e, tlm_logprob=lp))
    return replace(nbest, entries=tuple(out))


def standardize(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise InputError("cannot standardise an empty list")
    std = s.std()
    if std < 1e-8:
        return np.zeros_like(s)
    return (s - s.mean()) / std


def rescore(nbest: NBestList, p: RescoreParams) -> NBestList:
    """Rank by w_first*first + w_tlm*standardised(tlm) + length_penalty*length.

    Ties keep their original order.
    """
    if not nbest.entries:
        return nbest
    if any(e.tlm_logprob is None for e in nbest.entries):
        raise StateError(f"{nbest.utterance_id}: entries lack TLM scores")
    z = standardize([e.tlm_logprob for e in nbest.entries])
    scored = [
        replace(e, final_score=p.w_first * e.first_pass_score + p.w_tlm * float(z[i]) + p.length_penalty * e.length)
        for i, e in enumerate(nbest.entries)
    ]
    order = sorted(range(len(scored)), key=lambda i: -scored[i].final_score)
    return replace(nbest, entries=tuple(scored[i] for i in order))


@dataclass(frozen=True)
class RescoreResult:
    utterance_id: str
    tokens: Tuple[int, ...]
    nbest: NBestList


def rescore_conversation(
    utterances: Sequence[UtteranceInput],
    weights: WeightStore,
    cfg: ModelConfig,
    p: RescoreParams,
    width: int,
    max_context_tokens: int,
    history_mode: str = "decoded",
) -> List[RescoreResult]:
    """Second-pass decoding of a conversation with carried LM history."""
    if history_mode not in ("decoded", "gth"):
        raise InputError(f"unknown history mode {history_mode!r}")
    check_order(utterances)
    fresh = start_state(weights, cfg)
    context = fresh
    results = []
    for utt in utterances:
        if max_context_tokens == 0:
            context = fresh
        nb = generate_nbest(utt.posterior, max(width, p.n_best_size), p.n_best_size)
        ranked = rescore(tlm_score_nbest(nb, weights, cfg, context), p)
        best = ranked.entries[0].tokens if ranked.entries else ()
        results.append(RescoreResult(utt.utterance_id, best, ranked))
        if max_context_tokens == 0:
            continue
        if history_mode == "gth":
            if utt.reference_tokens is None:
                raise InputError(f"{utt.utterance_id}: ground-truth history needs a reference")
            carried = list(utt.reference_tokens)
        else:
            carried = list(best)
        state = advance(context, weights, cfg, carried)[1] if carried else context
        context = carry_context(state, weights, cfg, max_context_tokens)
    return results
