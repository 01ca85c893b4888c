"""Perplexity with carried cross-utterance history, and word error rate."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .model import ModelConfig, WeightStore
from .session import carry_context, sequence_log_prob, start_state

Conversation = Sequence[Sequence[int]]


@dataclass(frozen=True)
class EvalReport:
    dataset: str
    context_tokens: Optional[int]
    metric: str  # "PPL" or "WER"
    value: float
    count: int  # scored tokens (PPL) or reference words (WER)
    errors: Optional[dict] = None
    log_prob: Optional[float] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def conversation_log_prob(
    conversation: Conversation, weights: WeightStore, cfg: ModelConfig, context_tokens: int
) -> Tuple[float, int]:
    """Total content-token log-probability of one conversation and its token count.

    Each utterance is closed with SEP (never a target) and the history is cut
    to ``context_tokens`` before the next one; 0 means every utterance starts
    from a BOS-only history.
    """
    fresh = start_state(weights, cfg)
    state = fresh
    total, n = 0.0, 0
    for tokens in conversation:
        if context_tokens == 0:
            state = fresh
        lp, state = sequence_log_prob(state, weights, cfg, list(tokens))
        total += lp
        n += len(tokens)
        if context_tokens:
            state = carry_context(state, weights, cfg, context_tokens)
    return total, n


def perplexity(
    conversations: Sequence[Conversation],
    weights: WeightStore,
    cfg: ModelConfig,
    context_tokens: int,
    dataset: str = "",
) -> EvalReport:
    if not conversations or not any(len(u) for c in conversations for u in c):
        raise InputError("perplexity needs at least one reference token")
    if context_tokens < 0:
        raise InputError("context_tokens must be >= 0")
    total, n = 0.0, 0
    for conv in conversations:
        lp, k = conversation_log_prob(conv, weights, cfg, context_tokens)
        total += lp
        n += k
    return EvalReport(dataset, context_tokens, "PPL", math.exp(-total / n), n, log_prob=total)


def align_counts(hyp: Sequence[str], ref: Sequence[str]) -> Tuple[int, int, int]:
    """(substitutions, deletions, insertions) of a minimum-edit alignment."""
    h, r = len(hyp), len(ref)
    # cost[i][j] for ref[:i] vs hyp[:j]; back-trace prefers match/sub, then deletion
    cost = np.zeros((r + 1, h + 1), dtype=np.int64)
    cost[:, 0] = np.arange(r + 1)
    cost[0, :] = np.arange(h + 1)
    for i in range(1, r + 1):
        for j in range(1, h + 1):
            sub = cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
            cost[i, j] = min(sub, cost[i - 1, j] + 1, cost[i, j - 1] + 1)
    s = d = ins = 0
    i, j = r, h
    while i or j:
        if i and j and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i and cost[i, j] == cost[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return int(s), d, ins


def _words(x) -> List[str]:
    return x.split() if isinstance(x, str) else list(x)


def wer(hypotheses: Sequence, references: Sequence, dataset: str = "") -> EvalReport:
    """Corpus WER, micro-averaged: sum of edits over sum of reference words."""
    if len(hypotheses) != len(references):
        raise InputError(f"{len(hypotheses)} hypotheses for {len(references)} references")
    s = d = i = n = 0
    for hyp, ref in zip(hypotheses, references):
        hw, rw = _words(hyp), _words(ref)
        cs, cd, ci = align_counts(hw, rw)
        s, d, i, n = s + cs, d + cd, i + ci, n + len(rw)
    edits = s + d + i
    value = edits / n if n else float(edits > 0)
    return EvalReport(dataset, None, "WER", value, n,
                      errors={"substitutions": s, "deletions": d, "insertions": i})


def format_table(rows: Iterable[Tuple[str, Sequence[EvalReport]]]) -> str:
    """Plain-text table: one row per context size, one column per labelled run."""
    rows = list(rows)
    contexts = sorted({r.context_tokens for _, reps in rows for r in reps if r.context_tokens is not None})
    lines = [["context"] + [label for label, _ in rows]]
    for c in contexts:
        cells = []
        for _, reps in rows:
            r = next((r for r in reps if r.context_tokens == c), None)
            cells.append("-" if r is None else (f"{100 * r.value:.2f}" if r.metric == "WER" else f"{r.value:.2f}"))
        lines.append([str(c)] + cells)
    widths = [max(len(row[k]) for row in lines) for k in range(len(lines[0]))]
    return "\n".join(" | ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in lines)
