import json
import struct

import numpy as np
import pytest

from crossutt.ctc import AMPosterior
from crossutt.errors import FormatError, InputError, ValidationError
from crossutt.fileio import (
    MAGIC, Conversation, Manifest, Utterance, load_manifest, load_posterior, load_weights,
    read_container, save_manifest, save_posterior, save_weights, write_container,
)
from crossutt.model import ModelConfig, generate_weights


class TestContainer:
    def test_layout(self, tmp_path):
        write_container(tmp_path / "x.bin", {"kind": "demo"}, {"a": np.arange(3, dtype=np.float32)})
        data = (tmp_path / "x.bin").read_bytes()
        assert data[:8] == MAGIC
        (hlen,) = struct.unpack("<Q", data[8:16])
        header = json.loads(data[16:16 + hlen])
        assert header["tensors"]["a"] == {"shape": [3], "dtype": "<f4", "offset": 0}
        assert np.frombuffer(data[16 + hlen:], "<f4").tolist() == [0.0, 1.0, 2.0]

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(b"NOTMAGIC" + bytes(16))
        with pytest.raises(FormatError, match="magic"):
            read_container(tmp_path / "x.bin")

    def test_truncated_payload_names_tensor(self, tmp_path):
        write_container(tmp_path / "x.bin", {}, {"a": np.zeros(4, np.float32), "b": np.zeros(4, np.float32)})
        data = (tmp_path / "x.bin").read_bytes()
        (tmp_path / "x.bin").write_bytes(data[:-3])
        with pytest.raises(FormatError, match="'b'"):
            read_container(tmp_path / "x.bin")

    def test_garbled_header(self, tmp_path):
        (tmp_path / "x.bin").write_bytes(MAGIC + struct.pack("<Q", 5) + b"{oops")
        with pytest.raises(FormatError):
            read_container(tmp_path / "x.bin")


class TestWeights:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg = ModelConfig.toy()
        w = generate_weights(4, cfg)
        save_weights(cfg, w, tmp_path / "w.bin")
        cfg2, w2 = load_weights(tmp_path / "w.bin")
        assert cfg2 == cfg
        for name, arr in w.tensors.items():
            assert arr.tobytes() == w2.tensors[name].tobytes()

    def test_config_mismatch(self, tmp_path):
        cfg = ModelConfig.toy()
        w = generate_weights(0, cfg)
        tensors = dict(w.tensors)
        tensors["out"] = np.zeros((cfg.d_model, cfg.vocab_size + 1), np.float32)
        write_container(tmp_path / "w.bin", {"kind": "weights", "config": cfg.to_dict()}, tensors)
        with pytest.raises(FormatError, match="out"):
            load_weights(tmp_path / "w.bin")

    def test_missing_tensor(self, tmp_path):
        cfg = ModelConfig.toy()
        tensors = dict(generate_weights(0, cfg).tensors)
        del tensors["embed"]
        write_container(tmp_path / "w.bin", {"kind": "weights", "config": cfg.to_dict()}, tensors)
        with pytest.raises(FormatError, match="embed"):
            load_weights(tmp_path / "w.bin")

    def test_wrong_kind(self, tmp_path):
        save_posterior(AMPosterior("u", np.log(np.full((1, 4), 0.25))), tmp_path / "p.bin")
        with pytest.raises(FormatError):
            load_weights(tmp_path / "p.bin")


class TestPosteriorFiles:
    def test_uniform_single_frame(self, tmp_path):
        post = AMPosterior("u", np.log(np.full((1, 4), 0.25)))
        save_posterior(post, tmp_path / "p.bin")
        back = load_posterior(tmp_path / "p.bin")
        assert back.utterance_id == "u" and back.blank_id == 3
        np.testing.assert_array_equal(back.log_probs, post.log_probs.astype(np.float32))

    def test_header_shape_mismatch(self, tmp_path):
        lp = np.log(np.full((2, 4), 0.25)).astype(np.float32)
        write_container(tmp_path / "p.bin",
                        {"kind": "posterior", "utterance_id": "u", "T": 3, "vocab": 4, "blank_id": 3},
                        {"log_probs": lp})
        with pytest.raises(FormatError):
            load_posterior(tmp_path / "p.bin")

    def test_unnormalised_frame(self, tmp_path):
        lp = np.log(np.full((3, 4), 0.25))
        lp[1] += 0.5
        save_posterior(AMPosterior("u", lp), tmp_path / "p.bin")
        with pytest.raises(ValidationError, match="frame 1"):
            load_posterior(tmp_path / "p.bin")


class TestManifest:
    def _conv(self):
        return Conversation("c0", [Utterance("a", 0.0, 1.0, "a.bin", "hi there"),
                                   Utterance("b", 1.5, 2.0, "b.bin")])

    def test_round_trip(self, tmp_path):
        save_manifest(Manifest([self._conv()]), tmp_path / "m.jsonl")
        m = load_manifest(tmp_path / "m.jsonl")
        assert m.conversations == [self._conv()]
        assert m.root == tmp_path
        assert m.references() == [["hi there", ""]]

    def test_unsorted(self):
        c = self._conv()
        c.utterances.reverse()
        with pytest.raises(InputError):
            c.validate()

    def test_start_after_end(self):
        with pytest.raises(InputError):
            Conversation("c", [Utterance("a", 2.0, 1.0, "a.bin")]).validate()

    def test_duplicate_ids(self):
        with pytest.raises(InputError):
            Conversation("c", [Utterance("a", 0.0, 1.0, "a.bin"), Utterance("a", 1.0, 2.0, "b.bin")]).validate()

    def test_bad_line(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"conversation_id": "c"}\n')
        with pytest.raises(InputError):
            load_manifest(tmp_path / "m.jsonl")

    def test_empty(self, tmp_path):
        (tmp_path / "m.jsonl").write_text("\n")
        with pytest.raises(InputError):
            load_manifest(tmp_path / "m.jsonl")
