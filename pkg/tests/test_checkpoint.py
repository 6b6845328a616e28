"""Checkpoint serialization round-trip and rejection tests."""

import json
import struct

import numpy as np
import numpy.testing as npt
import pytest

from mrc import checkpoint as CK
from mrc.model import ModelConfig, init_params
from mrc.text import Vocab, RESERVED_SURFACES


def make_ckpt(seed=0, meta=None, vocab_extra=("aa", "bb", "cc")):
    vocab = Vocab.from_list(list(RESERVED_SURFACES) + list(vocab_extra))
    cfg = ModelConfig(vocab_size=len(vocab), layers=1, heads=2, d_model=8,
                      d_ff=16, max_len=12, dropout=0.0)
    params = init_params(cfg, seed=seed)
    return CK.Checkpoint(cfg, params, vocab,
                         meta if meta is not None else {"scheme": "dq_o",
                                                        "head": "softmax",
                                                        "highlight": False,
                                                        "stage": "s"})


def header_of(blob: bytes) -> dict:
    (hlen,) = struct.unpack("<I", blob[:4])
    return json.loads(blob[4:4 + hlen])


def rewrite_header(blob: bytes, mutate) -> bytes:
    (hlen,) = struct.unpack("<I", blob[:4])
    obj = json.loads(blob[4:4 + hlen])
    mutate(obj)
    head = json.dumps(obj).encode()
    return struct.pack("<I", len(head)) + head + blob[4 + hlen:]


class TestRoundTrip:
    def test_bytes_round_trip_preserves_everything(self):
        ck = make_ckpt(seed=3)
        blob = CK.to_bytes(ck)
        back = CK.from_bytes(blob)
        assert back.config == ck.config
        assert back.vocab.to_list() == ck.vocab.to_list()
        assert back.meta == ck.meta
        assert list(back.params) == list(ck.params)
        for name in ck.params:
            npt.assert_array_equal(back.params[name],
                                   ck.params[name].astype(np.float32))
            assert back.params[name].dtype == np.float64

    def test_file_round_trip(self, tmp_path):
        ck = make_ckpt(seed=4)
        path = tmp_path / "model.ckpt"
        CK.save(path, ck)
        back = CK.load(path)
        assert back.config == ck.config

    def test_serialization_is_deterministic(self):
        assert CK.to_bytes(make_ckpt(seed=5)) == CK.to_bytes(make_ckpt(seed=5))

    def test_reserialization_of_loaded_checkpoint_is_identical(self):
        blob = CK.to_bytes(make_ckpt(seed=6))
        assert CK.to_bytes(CK.from_bytes(blob)) == blob

    def test_header_is_inspectable_json(self):
        blob = CK.to_bytes(make_ckpt())
        head = header_of(blob)
        assert head["format_version"] == CK.FORMAT_VERSION
        assert head["meta"]["scheme"] == "dq_o"
        names = [n for n, _ in head["manifest"]]
        assert names[0] == "tok_emb" and names[-1] == "l_neg"


class TestRejections:
    def test_missing_or_misshapen_parameters(self):
        ck = make_ckpt()
        del ck.params["w_clf"]
        with pytest.raises(CK.CheckpointError, match="w_clf"):
            CK.to_bytes(ck)
        ck = make_ckpt()
        ck.params["w_clf"] = np.zeros(9)
        with pytest.raises(CK.CheckpointError, match="shape"):
            CK.to_bytes(ck)

    def test_truncated_blobs(self):
        blob = CK.to_bytes(make_ckpt())
        for cut in (0, 2, 10, len(blob) - 1):
            with pytest.raises(CK.CheckpointError):
                CK.from_bytes(blob[:cut])

    def test_trailing_garbage(self):
        blob = CK.to_bytes(make_ckpt())
        with pytest.raises(CK.CheckpointError):
            CK.from_bytes(blob + b"\x00\x00")

    def test_bad_header_json(self):
        head = b"this is not json"
        blob = struct.pack("<I", len(head)) + head
        with pytest.raises(CK.CheckpointError):
            CK.from_bytes(blob)

    def test_version_mismatch(self):
        blob = CK.to_bytes(make_ckpt())
        bad = rewrite_header(blob, lambda o: o.update(format_version=99))
        with pytest.raises(CK.CheckpointError, match="version"):
            CK.from_bytes(bad)

    def test_manifest_mismatch(self):
        blob = CK.to_bytes(make_ckpt())
        def swap(o):
            o["manifest"][0][1] = [1, 1]
        with pytest.raises(CK.CheckpointError):
            CK.from_bytes(rewrite_header(blob, swap))

    def test_malformed_manifest(self):
        blob = CK.to_bytes(make_ckpt())
        bad = rewrite_header(blob, lambda o: o.update(manifest="nope"))
        with pytest.raises(CK.CheckpointError):
            CK.from_bytes(bad)

    def test_vocab_size_disagreement(self):
        blob = CK.to_bytes(make_ckpt())
        bad = rewrite_header(blob, lambda o: o["vocab"].append("extra"))
        with pytest.raises(CK.CheckpointError, match="vocab"):
            CK.from_bytes(bad)

    def test_missing_key(self):
        blob = CK.to_bytes(make_ckpt())
        bad = rewrite_header(blob, lambda o: o.pop("config"))
        with pytest.raises(CK.CheckpointError):
            CK.from_bytes(bad)

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            CK.load(tmp_path / "absent.ckpt")
