"""Synthetic conversational corpora for desk-scale experiments.

References are sampled from a toy LM conditioned on the running
conversation history, so the text has genuine cross-utterance dependence.
Posteriors are built from a frame alignment of each reference:

* every token gets a slot of about ``frames`` frames; the first
  ``ceil((1 - blank_rate) * slot)`` frames carry the token and the rest are
  blank (a blank is forced between identical neighbours);
* each frame's logits are ``peak`` on the aligned label plus Gaussian noise.
  Token frames share one noise draw per slot (std ``noise``) plus a small
  per-frame draw, which makes substitutions, the errors an LM can repair,
  the dominant failure mode.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Tuple

import numpy as np

from . import numerics as nx
from .ctc import AMPosterior, UtteranceInput
from .fileio import Conversation, Manifest, Utterance, save_manifest, save_posterior, save_weights
from .model import ModelConfig, WeightStore, generate_weights
from .session import advance, carry_context, next_token_log_probs, start_state
from .vocab import Vocab


@dataclass
class FixtureSpec:
    n_conversations: int = 2
    utterances_per_conv: int = 8
    frames: int = 3
    vocab: int = 14
    min_tokens: int = 3
    max_tokens: int = 8
    blank_rate: float = 0.4
    noise: float = 2.5
    peak: float = 6.0
    lm_sharpness: float = 3.0
    generator_context: int = 1000
    model: dict = field(default_factory=lambda: {"n_layers": 2, "d_model": 32, "n_query_heads": 4})

    @classmethod
    def from_dict(cls, d: dict) -> "FixtureSpec":
        return cls(**d)

    def config(self) -> ModelConfig:
        return ModelConfig(vocab_size=self.vocab + 2, **self.model)


@dataclass
class Corpus:
    spec: FixtureSpec
    cfg: ModelConfig
    weights: WeightStore
    vocab: Vocab
    conversations: List[List[UtteranceInput]]

    def references(self) -> List[List[Tuple[int, ...]]]:
        return [[u.reference_tokens for u in conv] for conv in self.conversations]


def fixture_weights(seed: int, spec: FixtureSpec) -> WeightStore:
    """``generate_weights`` with the output projection scaled by ``lm_sharpness``."""
    cfg = spec.config()
    base = generate_weights(seed, cfg)
    tensors = dict(base.tensors)
    tensors["out"] = (base.tensors["out"] * np.float32(spec.lm_sharpness)).astype(np.float32)
    return WeightStore(cfg, tensors)


def alignment(tokens, frames: int, blank_rate: float, blank: int, rng) -> List[int]:
    labels = [blank]
    for i, tok in enumerate(tokens):
        slot = int(rng.integers(max(1, frames - 1), frames + 2))
        n_tok = math.ceil((1.0 - blank_rate) * slot)
        seg = [tok] * n_tok + [blank] * (slot - n_tok)
        nxt = tokens[i + 1] if i + 1 < len(tokens) else None
        if nxt == tok and seg[-1] != blank:
            if len(seg) > 1:
                seg[-1] = blank
            else:
                seg.append(blank)
        labels.extend(seg)
    labels.append(blank)
    return labels


def noisy_posterior(utt_id: str, labels, am_vocab: int, blank: int, peak: float, noise: float, rng) -> AMPosterior:
    T = len(labels)
    logits = np.zeros((T, am_vocab))
    logits[np.arange(T), labels] = peak
    logits += 0.25 * noise * rng.standard_normal((T, am_vocab))
    # shared noise per run of identical non-blank labels (one token slot)
    t = 0
    while t < T:
        u = t
        while u < T and labels[u] == labels[t]:
            u += 1
        if labels[t] != blank:
            logits[t:u] += noise * rng.standard_normal(am_vocab)
        t = u
    return AMPosterior(utt_id, nx.log_softmax_rows(logits).astype(np.float32), blank)


def sample_references(weights: WeightStore, cfg: ModelConfig, spec: FixtureSpec, rng) -> List[List[List[int]]]:
    convs = []
    for _ in range(spec.n_conversations):
        state = start_state(weights, cfg)
        conv = []
        for _ in range(spec.utterances_per_conv):
            n = int(rng.integers(spec.min_tokens, spec.max_tokens + 1))
            toks = []
            for _ in range(n):
                p = np.exp(next_token_log_probs(state, weights, cfg))
                tok = int(rng.choice(len(p), p=p / p.sum()))
                toks.append(tok)
                state = advance(state, weights, cfg, [tok])[1]
            conv.append(toks)
            state = carry_context(state, weights, cfg, spec.generator_context)
        convs.append(conv)
    return convs


def build_corpus(seed: int, spec: FixtureSpec) -> Corpus:
    cfg = spec.config()
    weights = fixture_weights(seed, spec)
    vocab = Vocab.synthetic(spec.vocab)
    rng = np.random.default_rng([seed, 1])
    blank = vocab.blank_id
    conversations = []
    for ci, refs in enumerate(sample_references(weights, cfg, spec, rng)):
        clock = 0.0
        conv = []
        for ui, toks in enumerate(refs):
            uid = f"c{ci}_u{ui}"
            labels = alignment(toks, spec.frames, spec.blank_rate, blank, rng)
            post = noisy_posterior(uid, labels, vocab.am_size, blank, spec.peak, spec.noise, rng)
            dur = 0.04 * post.T
            conv.append(UtteranceInput(uid, post, tuple(toks), round(clock, 3), round(clock + dur, 3)))
            clock += dur + 0.5
        conversations.append(conv)
    return Corpus(spec, cfg, weights, vocab, conversations)


def make_fixture(seed: int, spec: FixtureSpec, out_dir) -> Path:
    """Write manifest.jsonl, posteriors/, weights.bin, vocab.json and spec.json; returns the manifest path."""
    out = Path(out_dir)
    (out / "posteriors").mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(seed, spec)
    convs = []
    for ci, conv in enumerate(corpus.conversations):
        utts = []
        for u in conv:
            rel = f"posteriors/{u.utterance_id}.bin"
            save_posterior(u.posterior, out / rel)
            utts.append(Utterance(u.utterance_id, u.start_s, u.end_s, rel,
                                  corpus.vocab.detokenize(u.reference_tokens)))
        convs.append(Conversation(f"c{ci}", utts))
    save_manifest(Manifest(convs, out), out / "manifest.jsonl")
    save_weights(corpus.cfg, corpus.weights, out / "weights.bin")
    corpus.vocab.save(out / "vocab.json")
    (out / "spec.json").write_text(json.dumps(dict(asdict(spec), seed=seed), indent=2))
    return out / "manifest.jsonl"
