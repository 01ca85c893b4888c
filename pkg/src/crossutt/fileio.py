"""Binary tensor container, weight/posterior files and conversation manifests.

Container layout (all little-endian)::

    8 bytes   magic  b"XUTTBIN1"
    8 bytes   uint64 header length H
    H bytes   UTF-8 JSON header; "tensors" maps name -> {shape, dtype, offset}
    payload   float32 tensors, contiguous, in header order; offsets are
              relative to the start of the payload

Manifests are JSON lines, one conversation per line::

    {"conversation_id": "c0", "utterances": [
        {"utterance_id": "c0_u0", "start_s": 0.0, "end_s": 1.2,
         "posterior_path": "post/c0_u0.bin", "reference": "hello there"}, ...]}

Relative posterior paths resolve against the manifest's directory.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .ctc import AMPosterior
from .errors import FormatError, InputError, SchemaError
from .model import ModelConfig, WeightStore, weight_shapes

MAGIC = b"XUTTBIN1"
DTYPE = "<f4"


def write_container(path, header: dict, tensors: Dict[str, np.ndarray]) -> None:
    index, offset, blobs = {}, 0, []
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        index[name] = {"shape": list(a.shape), "dtype": DTYPE, "offset": offset}
        blobs.append(a.tobytes())
        offset += a.nbytes
    head = json.dumps(dict(header, tensors=index), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        for b in blobs:
            f.write(b)


def read_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {data[:8]!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    payload = memoryview(data)[16 + hlen:]
    tensors = {}
    for name, spec in header.get("tensors", {}).items():
        if spec.get("dtype") != DTYPE:
            raise FormatError(f"{path}: tensor {name!r} has unsupported dtype {spec.get('dtype')}")
        shape = tuple(spec["shape"])
        start = spec["offset"]
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if start + nbytes > len(payload):
            raise FormatError(f"{path}: payload truncated inside tensor {name!r}")
        tensors[name] = np.frombuffer(payload[start:start + nbytes], dtype=DTYPE).reshape(shape).copy()
    return header, tensors


def save_weights(cfg: ModelConfig, store: WeightStore, path) -> None:
    write_container(path, {"kind": "weights", "config": cfg.to_dict()}, store.tensors)


def load_weights(path) -> Tuple[ModelConfig, WeightStore]:
    header, tensors = read_container(path)
    if header.get("kind") != "weights":
        raise FormatError(f"{path}: not a weight file")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (KeyError, SchemaError) as exc:
        raise FormatError(f"{path}: bad config ({exc})") from None
    for name, shape in weight_shapes(cfg).items():
        if name not in tensors:
            raise FormatError(f"{path}: tensor {name!r} missing")
        if tensors[name].shape != shape:
            raise FormatError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, config implies {shape}")
    try:
        return cfg, WeightStore(cfg, tensors)
    except SchemaError as exc:
        raise FormatError(f"{path}: {exc}") from None


def save_posterior(post: AMPosterior, path) -> None:
    header = {"kind": "posterior", "utterance_id": post.utterance_id, "T": post.T,
              "vocab": post.am_vocab, "blank_id": post.blank_id}
    write_container(path, header, {"log_probs": post.log_probs})


def load_posterior(path, tol: float = 1e-3) -> AMPosterior:
    header, tensors = read_container(path)
    if header.get("kind") != "posterior" or "log_probs" not in tensors:
        raise FormatError(f"{path}: not a posterior file")
    lp = tensors["log_probs"]
    if lp.shape != (header["T"], header["vocab"]):
        raise FormatError(f"{path}: header says {header['T']}x{header['vocab']}, payload is {lp.shape}")
    post = AMPosterior(header["utterance_id"], lp, header["blank_id"])
    return post.validate(tol)


@dataclass
class Utterance:
    utterance_id: str
    start_s: float
    end_s: float
    posterior_path: str
    reference: Optional[str] = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Conversation:
    conversation_id: str
    utterances: List[Utterance] = field(default_factory=list)

    def validate(self) -> "Conversation":
        seen = set()
        prev = None
        for u in self.utterances:
            if u.start_s > u.end_s:
                raise InputError(f"{u.utterance_id}: start {u.start_s} after end {u.end_s}")
            if prev is not None and u.start_s < prev:
                raise InputError(f"{self.conversation_id}: utterances not sorted by start time at {u.utterance_id}")
            if u.utterance_id in seen:
                raise InputError(f"{self.conversation_id}: duplicate utterance id {u.utterance_id}")
            seen.add(u.utterance_id)
            prev = u.start_s
        return self

    def to_json(self) -> str:
        return json.dumps({"conversation_id": self.conversation_id,
                           "utterances": [u.to_dict() for u in self.utterances]})

    @classmethod
    def from_json(cls, line: str) -> "Conversation":
        try:
            d = json.loads(line)
            return cls(d["conversation_id"], [Utterance(**u) for u in d["utterances"]])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InputError(f"bad manifest line: {exc}") from None


@dataclass
class Manifest:
    conversations: List[Conversation]
    root: Path = Path(".")

    def posterior(self, utt: Utterance) -> AMPosterior:
        p = Path(utt.posterior_path)
        return load_posterior(p if p.is_absolute() else self.root / p)

    def references(self) -> List[List[str]]:
        return [[u.reference or "" for u in c.utterances] for c in self.conversations]


def load_manifest(path) -> Manifest:
    path = Path(path)
    convs = [Conversation.from_json(line).validate()
             for line in path.read_text().splitlines() if line.strip()]
    if not convs:
        raise InputError(f"{path}: empty manifest")
    return Manifest(convs, path.parent)


def save_manifest(manifest: Manifest, path) -> None:
    Path(path).write_text("".join(c.to_json() + "\n" for c in manifest.conversations))
