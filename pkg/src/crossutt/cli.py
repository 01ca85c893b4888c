"""Command-line entry point: ``crossutt <command> ...``.

Exit codes: 0 success, 2 input/format error, 3 search/decode failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .bench import bench_incremental
from .ctc import FusionParams, UtteranceInput, decode_corpus
from .errors import CrossUttError, InputError
from .evaluation import EvalReport, format_table, perplexity, wer
from .fileio import Manifest, load_manifest, load_weights
from .fixture import FixtureSpec, make_fixture
from .model import ModelConfig, generate_weights
from .rescore import RescoreParams, rescore_conversation
from .tuner import FUSION_RANGES, RESCORE_RANGES, SearchSpace, random_search
from .vocab import Vocab, normalize_text

log = logging.getLogger("crossutt")


class Corpus:
    """Manifest + vocabulary + model loaded together and cross-checked."""

    def __init__(self, manifest_path, weights_path, vocab_path=None):
        self.manifest: Manifest = load_manifest(manifest_path)
        self.cfg, self.weights = load_weights(weights_path)
        vocab_path = Path(vocab_path) if vocab_path else self.manifest.root / "vocab.json"
        self.vocab = Vocab.load(vocab_path)
        if self.vocab.lm_size != self.cfg.vocab_size:
            raise InputError(
                f"vocabulary has {len(self.vocab)} pieces but the model expects {self.cfg.n_content}"
            )
        self.conversations: List[List[UtteranceInput]] = []
        for conv in self.manifest.conversations:
            utts = []
            for u in conv.utterances:
                ref = tuple(self.vocab.tokenize(u.reference)) if u.reference is not None else None
                utts.append(UtteranceInput(u.utterance_id, self.manifest.posterior(u), ref, u.start_s, u.end_s))
            self.conversations.append(utts)

    def reference_texts(self) -> List[Optional[str]]:
        return [None if u.reference is None else normalize_text(u.reference)
                for c in self.manifest.conversations for u in c.utterances]

    def reference_tokens(self):
        out = []
        for conv in self.conversations:
            if any(u.reference_tokens is None for u in conv):
                raise InputError("every utterance needs a reference transcript")
            out.append([u.reference_tokens for u in conv])
        return out

    def score(self, hyp_tokens: List[tuple]) -> Optional[EvalReport]:
        refs = self.reference_texts()
        if any(r is None for r in refs):
            return None
        return wer([self.vocab.detokenize(t) for t in hyp_tokens], refs)


def _write_lines(path, lines) -> None:
    text = "".join(line + "\n" for line in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _fusion_params(args) -> FusionParams:
    return FusionParams(alpha=args.alpha, beta_bonus=args.beta, cutoff=args.cutoff, beam_width=args.beam_width)


def _decode(corpus: Corpus, p: FusionParams, context: int, history: str, max_gap=None, workers=1):
    return decode_corpus(corpus.conversations, corpus.weights, corpus.cfg, p, context, history,
                         max_gap_seconds=max_gap, workers=workers)


def cmd_decode(args) -> int:
    corpus = Corpus(args.manifest, args.weights, args.vocab)
    results = _decode(corpus, _fusion_params(args), args.context_tokens, args.history,
                      args.max_gap_seconds, args.workers)
    lines, hyps = [], []
    for conv, res in zip(corpus.manifest.conversations, results):
        for r in res:
            hyps.append(r.tokens)
            lines.append(json.dumps({"conversation_id": conv.conversation_id, "utterance_id": r.utterance_id,
                                     "tokens": list(r.tokens), "text": corpus.vocab.detokenize(r.tokens),
                                     "score": r.score}))
    _write_lines(args.out, lines)
    report = corpus.score(hyps)
    if report is not None:
        log.info("WER %.4f over %d words (context %d, %s history)",
                 report.value, report.count, args.context_tokens, args.history)
    return 0


def _rescore(corpus: Corpus, p: RescoreParams, width: int, context: int, history: str):
    return [rescore_conversation(conv, corpus.weights, corpus.cfg, p, width, context, history)
            for conv in corpus.conversations]


def cmd_rescore(args) -> int:
    corpus = Corpus(args.manifest, args.weights, args.vocab)
    p = RescoreParams(args.w_first, args.w_tlm, args.length_penalty, args.nbest)
    results = _rescore(corpus, p, args.width, args.context_tokens, args.history)
    _write_lines(args.out, [r.nbest.to_json(corpus.vocab) for res in results for r in res])
    report = corpus.score([r.tokens for res in results for r in res])
    if report is not None:
        log.info("WER %.4f over %d words (context %d)", report.value, report.count, args.context_tokens)
    return 0


def cmd_ppl(args) -> int:
    corpus = Corpus(args.manifest, args.weights, args.vocab)
    refs = corpus.reference_tokens()
    reports = [perplexity(refs, corpus.weights, corpus.cfg, c, dataset=str(args.manifest))
               for c in args.context_tokens]
    _write_lines(args.out, [json.dumps(r.to_dict()) for r in reports])
    print(format_table([("PPL", reports)]), file=sys.stderr)
    return 0


def _read_texts(path) -> dict:
    """utterance_id -> text from a transcript file or a manifest."""
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        if "utterances" in d:
            for u in d["utterances"]:
                out[u["utterance_id"]] = u.get("reference")
        else:
            out[d["utterance_id"]] = d.get("text")
    return out


def cmd_wer(args) -> int:
    hyp, ref = _read_texts(args.hyp), _read_texts(args.ref)
    if set(hyp) != set(ref):
        missing = sorted(set(ref) ^ set(hyp))
        raise InputError(f"hypothesis and reference utterances differ, e.g. {missing[0]}")
    ids = sorted(ref)
    if any(ref[i] is None for i in ids):
        raise InputError("reference file lacks transcripts")
    report = wer([normalize_text(hyp[i] or "") for i in ids], [normalize_text(ref[i]) for i in ids],
                 dataset=str(args.ref))
    _write_lines(args.out, [json.dumps(report.to_dict())])
    return 0


def cmd_tune(args) -> int:
    corpus = Corpus(args.manifest, args.weights, args.vocab)
    if args.mode == "fusion":
        ranges = FUSION_RANGES

        def objective(params):
            p = FusionParams(params["alpha"], params["beta_bonus"], params["cutoff"], args.beam_width)
            res = _decode(corpus, p, args.context_tokens, args.history)
            return corpus.score([r.tokens for conv in res for r in conv]).value
    else:
        ranges = RESCORE_RANGES

        def objective(params):
            p = RescoreParams(params["w_first"], params["w_tlm"], params["length_penalty"], args.nbest)
            res = _rescore(corpus, p, args.width, args.context_tokens, args.history)
            return corpus.score([r.tokens for conv in res for r in conv]).value

    if any(r is None for r in corpus.reference_texts()):
        raise InputError("tuning needs reference transcripts")
    result = random_search(SearchSpace(dict(ranges), args.trials, args.seed), objective)
    _write_lines(args.out, [t.to_json() for t in result.trials])
    print(json.dumps({"best_params": result.best_params, "best_wer": result.best_wer}))
    return 0


def cmd_fixture(args) -> int:
    spec = {}
    if args.spec:
        p = Path(args.spec)
        spec = json.loads(p.read_text() if p.exists() else args.spec)
    manifest = make_fixture(args.seed, FixtureSpec.from_dict(spec), args.out_dir)
    print(manifest)
    return 0


def cmd_bench(args) -> int:
    if args.weights:
        cfg, weights = load_weights(args.weights)
    else:
        cfg = ModelConfig()
        weights = generate_weights(0, cfg)
    variants = ["multiquery", "multihead"] if args.attention == "both" else [args.attention]
    results = [bench_incremental(weights, cfg, v, args.batch, args.cache, args.iterations) for v in variants]
    rows = [r.to_dict() for r in results]
    if args.out and str(args.out).endswith(".csv"):
        with open(args.out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    else:
        _write_lines(args.out, [json.dumps(r) for r in rows])
    if len(results) == 2:
        log.info("multi-query speedup %.2fx", results[1].mean_s / results[0].mean_s)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossutt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def corpus_args(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--weights", required=True)
        p.add_argument("--vocab", help="vocabulary JSON (default: vocab.json next to the manifest)")
        p.add_argument("--out", default="-")

    p = sub.add_parser("decode", help="beam search with LM fusion")
    corpus_args(p)
    p.add_argument("--context-tokens", type=int, default=0)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.3)
    p.add_argument("--cutoff", type=float, default=-8.0)
    p.add_argument("--beam-width", type=int, default=25)
    p.add_argument("--history", choices=["decoded", "gth"], default="decoded")
    p.add_argument("--max-gap-seconds", type=float, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rescore", help="n-best rescoring with the LM")
    corpus_args(p)
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--nbest", type=int, default=100)
    p.add_argument("--w-first", type=float, default=1.0)
    p.add_argument("--w-tlm", type=float, default=1.0)
    p.add_argument("--length-penalty", type=float, default=0.0)
    p.add_argument("--context-tokens", type=int, default=0)
    p.add_argument("--history", choices=["decoded", "gth"], default="decoded")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("ppl", help="perplexity of the references")
    corpus_args(p)
    p.add_argument("--context-tokens", type=int, nargs="+", default=[0])
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("wer", help="word error rate between two transcript files")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True, help="transcript JSONL or manifest")
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("tune", help="random search over decoding hyperparameters")
    corpus_args(p)
    p.add_argument("--mode", choices=["fusion", "rescore"], default="fusion")
    p.add_argument("--trials", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--context-tokens", type=int, default=0)
    p.add_argument("--history", choices=["decoded", "gth"], default="decoded")
    p.add_argument("--beam-width", type=int, default=25)
    p.add_argument("--width", type=int, default=1000)
    p.add_argument("--nbest", type=int, default=100)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("fixture", help="write a synthetic corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spec", help="JSON file or inline JSON overriding FixtureSpec fields")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_fixture)

    p = sub.add_parser("bench", help="multi-query vs multi-head incremental decoding time")
    p.add_argument("--weights", help="weight file (default: generated 12-layer model)")
    p.add_argument("--batch", type=int, default=25)
    p.add_argument("--cache", type=int, default=500)
    p.add_argument("--attention", choices=["multiquery", "multihead", "both"], default="both")
    p.add_argument("--iterations", type=int, default=10)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        log.error("%s", exc)
        return 2
    except CrossUttError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except ValueError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
