import struct
from dataclasses import fields

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from repsnet.checkpoint import dump_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint
from repsnet.config import Config, format_config, load_config, parse_config, save_config
from repsnet.errors import ContractError
from repsnet.tensor import parameter


class TestConfig:
    def test_defaults(self):
        c = Config()
        assert (c.lr, c.tau, c.alpha_l, c.k, c.min_len, c.max_tokens, c.batch_size) == \
            (5e-5, 0.07, 1.0, 1, 5, 200, 8)

    def test_comments_and_blank_lines(self):
        c = parse_config("# run\n\nlr = 0.001  # faster\nuse_context = false\nretrieval_key = image\n")
        assert c.lr == 0.001 and c.use_context is False and c.retrieval_key == "image"

    def test_unknown_key_named(self):
        with pytest.raises(ContractError, match="learning_rate"):
            parse_config("learning_rate = 3\n")

    @pytest.mark.parametrize("line,key", [("tau = 0", "tau"), ("batch_size = -1", "batch_size"),
                                          ("beta1 = 1.0", "beta1"), ("max_tokens = 500", "max_tokens"),
                                          ("epochs = x", "epochs"), ("augment = maybe", "augment")])
    def test_invalid_values_name_key(self, line, key):
        with pytest.raises(ContractError, match=key):
            parse_config(line)

    def test_missing_equals(self):
        with pytest.raises(ContractError, match="line 2"):
            parse_config("seed = 1\nseed 2\n")

    def test_file_round_trip(self, tmp_path):
        c = Config(seed=4, lr=3e-4, epochs=7, train_data="a b.jsonl")
        save_config(c, tmp_path / "c.txt")
        assert load_config(tmp_path / "c.txt") == c

    @settings(max_examples=50)
    @given(st.integers(0, 2**31), st.floats(1e-6, 1.0), st.floats(0.01, 5.0), st.integers(1, 64),
           st.booleans(), st.sampled_from(["fused", "image"]))
    def test_parse_format_identity(self, seed, lr, tau, bs, ctx, key):
        c = Config(seed=seed, lr=lr, tau=tau, batch_size=bs, use_context=ctx, retrieval_key=key)
        text = format_config(c)
        assert parse_config(text) == c
        assert format_config(parse_config(text)) == text

    def test_every_field_serialized(self):
        text = format_config(Config())
        assert [line.split(" = ")[0] for line in text.splitlines()] == [f.name for f in fields(Config)]


def params(seed=0):
    rng = np.random.default_rng(seed)
    return {"b.w": parameter(rng.normal(size=(3, 4))), "a": parameter(rng.normal(size=5)),
            "c.s": parameter(np.array(2.5)), "d.e": parameter(rng.normal(size=(2, 0, 3)))}


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        cfg, p = Config(seed=3, vocab_size=40), params()
        save_checkpoint(cfg, p, tmp_path / "m.rsnc")
        cfg2, p2 = load_checkpoint(tmp_path / "m.rsnc")
        assert cfg2 == cfg and set(p2) == set(p)
        for k in p:
            assert p2[k].shape == p[k].shape and p2[k].data.tobytes() == p[k].data.tobytes()
        assert dump_checkpoint(cfg2, p2) == dump_checkpoint(cfg, p)

    def test_layout(self):
        cfg = Config()
        raw = dump_checkpoint(cfg, {"w": parameter(np.array([[1.0, 2.0]]))})
        text = format_config(cfg).encode()
        assert raw[:4] == b"RSNC" and struct.unpack("<I", raw[4:8])[0] == 1
        n = struct.unpack("<I", raw[8:12])[0]
        assert raw[12:12 + n] == text
        pos = 12 + n
        assert struct.unpack("<I", raw[pos:pos + 4])[0] == 1
        assert struct.unpack("<I", raw[pos + 4:pos + 8])[0] == 1 and raw[pos + 8:pos + 9] == b"w"
        assert struct.unpack("<I", raw[pos + 9:pos + 13])[0] == 2
        assert struct.unpack("<QQ", raw[pos + 13:pos + 29]) == (1, 2)
        assert np.frombuffer(raw[pos + 29:], "<f8").tolist() == [1.0, 2.0]

    def test_order_independent_of_insertion(self):
        p = params()
        flipped = dict(reversed(list(p.items())))
        assert dump_checkpoint(Config(), p) == dump_checkpoint(Config(), flipped)

    def test_bad_magic(self):
        raw = bytearray(dump_checkpoint(Config(), params()))
        raw[:4] = b"RSNX"
        with pytest.raises(ContractError, match="magic"):
            parse_checkpoint(bytes(raw))

    def test_bad_version(self):
        raw = bytearray(dump_checkpoint(Config(), params()))
        raw[4:8] = struct.pack("<I", 2)
        with pytest.raises(ContractError, match="version"):
            parse_checkpoint(bytes(raw))

    def test_truncation_and_trailing(self):
        raw = dump_checkpoint(Config(), params())
        for cut in (3, 9, 40, len(raw) - 8, len(raw) - 1):
            with pytest.raises(ContractError):
                parse_checkpoint(raw[:cut])
        with pytest.raises(ContractError, match="trailing"):
            parse_checkpoint(raw + b"\0")
