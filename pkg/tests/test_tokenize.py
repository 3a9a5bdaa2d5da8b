import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmae_ids.errors import InvalidTokenMap, UnknownToken
from cmae_ids.tokenize import (SubwordModel, TokenMap, Tokenizer, decode, encode_bytes,
                               encode_subword, escape_token, hex2int_map, load_hex2tok_map,
                               load_subword_vocab)

PAYLOAD = bytes.fromhex("00c1b114eb") + b"\x00" * 5


def llama_style_map(tmp_path):
    p = tmp_path / "llama2.map"
    p.write_text("".join(f"{b:02x}\t{b + 3}\n" for b in range(256)) + "PAD\t32000\n")
    return load_hex2tok_map(p)


def test_hex2int_examples():
    m = hex2int_map()
    assert (m[0x00], m[0xC1], m[0xB1], m[0xFF]) == (1, 194, 178, 256)
    assert m.vocab_size == 257 and m.pad_id == 0
    assert all(m[b] == b + 1 for b in range(256))


def test_hex2int_worked_example():
    ids = encode_bytes(PAYLOAD, hex2int_map()).tolist()
    assert ids[:3] == [1, 194, 178] and ids[-1] == 1


def test_llama_style_map(tmp_path):
    ids = encode_bytes(PAYLOAD, llama_style_map(tmp_path)).tolist()
    assert ids[:3] == [3, 196, 180] and ids[-1] == 3


def test_identity_plus_one_file_equals_hex2int(tmp_path):
    p = tmp_path / "h.map"
    hex2int_map().save(p)
    assert np.array_equal(load_hex2tok_map(p).table, hex2int_map().table)


def test_map_file_errors(tmp_path):
    p = tmp_path / "short.map"
    p.write_text("".join(f"{b:02x}\t{b + 1}\n" for b in range(255)) + "PAD\t0\n")
    with pytest.raises(InvalidTokenMap):
        load_hex2tok_map(p)
    p.write_text("".join(f"{b:02x}\t{b // 2 + 1}\n" for b in range(256)) + "PAD\t0\n")
    with pytest.raises(InvalidTokenMap):
        load_hex2tok_map(p)
    p.write_text("00\t1\n00\t2\n")
    with pytest.raises(InvalidTokenMap):
        load_hex2tok_map(p)


def test_encode_pad_and_truncate():
    s = encode_bytes(bytes([0x00, 0xC1, 0xB1]), hex2int_map(), 5)
    assert s.tolist() == [1, 194, 178, 0, 0] and s.true_length == 3
    e = encode_bytes(b"", hex2int_map(), 4)
    assert e.tolist() == [0, 0, 0, 0] and e.true_length == 0
    long = bytes(range(256)) * 8
    t = encode_bytes(long[:2000], hex2int_map(), 1500)
    assert t.true_length == 1500
    assert t.tolist() == [b + 1 for b in long[:1500]]


def test_decode_examples():
    m = hex2int_map()
    assert decode(encode_bytes(b"GET", m), m) == b"GET"
    assert decode([1, 194, 178, 0, 0], m) == bytes([0x00, 0xC1, 0xB1])
    with pytest.raises(UnknownToken):
        decode([1, 300], m)


token_maps = st.permutations(list(range(1, 400))).map(
    lambda perm: TokenMap(np.array(perm[:256]), 0, provenance="external"))


@given(st.binary(max_size=300), token_maps)
def test_round_trip_property(payload, m):
    assert decode(encode_bytes(payload, m), m) == payload


def test_round_trip_ten_thousand():
    rng = np.random.default_rng(7)
    m = hex2int_map()
    for _ in range(10_000):
        p = rng.integers(0, 256, size=int(rng.integers(0, 64)), dtype=np.uint8).tobytes()
        assert decode(encode_bytes(p, m), m) == p


@given(st.binary(max_size=64), st.integers(1, 64), st.integers(0, 64))
def test_pad_exclusive_and_prefix(payload, l1, extra):
    m = hex2int_map()
    s1 = encode_bytes(payload, m, l1)
    assert m.pad_id not in s1.ids[: s1.true_length]
    l2 = l1 + extra
    if l2 <= len(payload):
        s2 = encode_bytes(payload, m, l2)
        assert s1.tolist() == s2.tolist()[:l1]


def _subword(vocab):
    return SubwordModel({k.encode(): v for k, v in vocab.items()}, pad_id=0,
                        byte_fallback={b: 1000 + b for b in range(256)})


def test_subword_single_char_vocab():
    m = _subword({"0": 29900, "c": 29883, "1": 29896, "b": 29890})
    assert encode_subword(b"00c1b1", m).tolist()[:3] == [29900, 29900, 29883]


def test_subword_longest_match():
    m = _subword({"00": 410, "c": 66, "1": 16, "0": 15, "b": 65})
    assert encode_subword(b"00c1b1", m).tolist()[:3] == [410, 66, 16]
    assert encode_subword(b"000", m).tolist() == [410, 15]


def test_subword_byte_vocab_matches_byte_map():
    m = SubwordModel({bytes([b]): b + 1 for b in range(256)}, pad_id=0)
    payload = bytes(range(256))
    assert encode_subword(payload, m, 300).tolist() == encode_bytes(payload, hex2int_map(), 300).tolist()


@given(st.binary(max_size=100))
def test_subword_totality(data):
    m = _subword({"ab": 5, "abc": 6, "\x00\x01": 7})
    seq = encode_subword(data, m)
    assert seq.true_length <= len(data)


def test_subword_file(tmp_path):
    pieces = {b"00": 410, b"\\x": 500, b"\t": 9, b"c": 66}
    lines = [f"{escape_token(k)}\t{v}" for k, v in pieces.items()]
    lines += [f"<0x{b:02X}>\t{b + 3}" for b in range(256)] + ["<pad>\t32000"]
    p = tmp_path / "v.txt"
    p.write_text("\n".join(lines) + "\n")
    m = load_subword_vocab(p)
    assert m.pad_id == 32000 and m.vocabulary == pieces
    assert encode_subword(b"00c\t\\x\xff", m).tolist() == [410, 66, 9, 500, 0xFF + 3]


def test_subword_missing_fallback():
    with pytest.raises(InvalidTokenMap):
        SubwordModel({b"a": 1}, pad_id=0)


def test_tokenizer_batch_widths():
    tok = Tokenizer(hex2int_map())
    x = tok.encode_batch([b"ab", b"abcdef"], max_len="max")
    assert x.shape == (2, 6) and x[0].tolist() == [98, 99, 0, 0, 0, 0]
    assert tok.encode_batch([b"a"], max_len=None, min_len=4).shape == (1, 4)
    assert tok.encode_batch([b"abc"] * 3, max_len=1500).shape == (3, 1500)
    sub = Tokenizer(subword=_subword({"00": 410}))
    assert sub.encode(b"\x00").tolist() == [410]  # hex text "00"
