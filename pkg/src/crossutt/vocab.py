"""Subword inventory shared by the acoustic model and the LM, and text normalisation.

Pieces use the ``▁`` word-boundary marker. Content ids are dense from 0.
On the AM side blank is id ``C`` (one past the last piece); on the LM side
BOS is ``C`` and SEP is ``C + 1``.
"""
from __future__ import annotations

import itertools
import json
import re
from pathlib import Path
from typing import Dict, List, Sequence

from .errors import FormatError, VocabError

WORD_START = "▁"

_PUNCT = re.compile(r"[^\w\s']")
_CONTRACTION = re.compile(r"\s+'(?=\w)")
_SPACES = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lower-case, drop punctuation except apostrophes, close contraction gaps ("it 's" -> "it's")."""
    text = _PUNCT.sub(" ", text.lower())
    text = _CONTRACTION.sub("'", text)
    return _SPACES.sub(" ", text).strip()


class Vocab:
    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if len(set(pieces)) != len(pieces):
            raise VocabError("duplicate pieces in inventory")
        if len(pieces) < 2:
            raise VocabError("need at least two content pieces")
        self.pieces = pieces
        self.ids: Dict[str, int] = {p: i for i, p in enumerate(pieces)}
        self._longest = max(len(p) for p in pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    @property
    def blank_id(self) -> int:
        return len(self.pieces)

    @property
    def bos_id(self) -> int:
        return len(self.pieces)

    @property
    def sep_id(self) -> int:
        return len(self.pieces) + 1

    @property
    def am_size(self) -> int:
        return len(self.pieces) + 1

    @property
    def lm_size(self) -> int:
        return len(self.pieces) + 2

    def tokenize(self, text: str) -> List[int]:
        """Greedy longest-match segmentation of normalised words."""
        out = []
        for word in normalize_text(text).split():
            s = WORD_START + word
            i = 0
            while i < len(s):
                for j in range(min(len(s), i + self._longest), i, -1):
                    tid = self.ids.get(s[i:j])
                    if tid is not None:
                        out.append(tid)
                        i = j
                        break
                else:
                    raise VocabError(f"cannot segment {word!r} at {s[i:]!r}")
        return out

    def detokenize(self, ids: Sequence[int]) -> str:
        try:
            text = "".join(self.pieces[i] for i in ids)
        except IndexError:
            raise VocabError(f"id outside content inventory in {list(ids)}") from None
        return text.replace(WORD_START, " ").strip()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"pieces": self.pieces}, ensure_ascii=False))

    @classmethod
    def load(cls, path) -> "Vocab":
        try:
            return cls(json.loads(Path(path).read_text())["pieces"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"{path}: bad vocabulary file ({exc})") from None

    @classmethod
    def synthetic(cls, size: int) -> "Vocab":
        """Whole-word pieces made of consonant-vowel syllables ("▁ba", "▁be", ..., "▁baba")."""
        syll = [c + v for c in "bdfgklmnprstvz" for v in "aeiou"]
        words = itertools.chain(syll, (a + b for a in syll for b in syll))
        return cls([WORD_START + w for w in itertools.islice(words, size)])
