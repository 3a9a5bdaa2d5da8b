import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cmae_ids import data as D
from cmae_ids.data import ClassLabel, PayloadRecord
from cmae_ids.errors import (InsufficientClassSamples, InvalidHexDigit, InvalidHexLength,
                             InvalidSpec, MalformedRow, UnknownLabel)


def test_parse_hex_examples():
    assert D.parse_hex_payload("474554") == b"GET"
    assert D.parse_hex_payload("") == b""
    assert D.parse_hex_payload("00c1b1") == bytes([0x00, 0xC1, 0xB1])


def test_parse_hex_errors():
    with pytest.raises(InvalidHexLength):
        D.parse_hex_payload("abc")
    with pytest.raises(InvalidHexDigit) as exc:
        D.parse_hex_payload("00zz")
    assert exc.value.offset == 2


@given(st.binary(max_size=64), st.booleans())
def test_hex_round_trip(raw, upper):
    h = raw.hex().upper() if upper else raw.hex()
    assert D.bytes_to_hex(D.parse_hex_payload(h)) == h.lower()


@pytest.mark.parametrize("text", ["Port Scan", "port_scan", "PORTSCAN", "port-scan"])
def test_label_normalization(text):
    assert ClassLabel.parse(text) is ClassLabel.PortScan


def test_unknown_label():
    with pytest.raises(UnknownLabel):
        ClassLabel.parse("Heartbleed")


def test_load_csv_and_jsonl(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("hex_payload,label\n474554,Benign\ndeadbeef,DoS\n")
    recs = D.load_dataset(p)
    assert [(r.payload, r.label) for r in recs] == [(b"GET", ClassLabel.Benign),
                                                    (bytes.fromhex("deadbeef"), ClassLabel.DoS)]
    j = tmp_path / "d.jsonl"
    j.write_text(json.dumps({"hex_payload": "474554", "label": "web"}) + "\n")
    assert D.load_dataset(j)[0].label is ClassLabel.Web


def test_load_header_only(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text("hex_payload,label\n")
    assert D.load_dataset(p) == []


def test_load_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("hex_payload,label\n4745,Benign\n47x5,Benign\n")
    with pytest.raises(InvalidHexDigit, match="line 3"):
        D.load_dataset(p)
    p.write_text("hex_payload,label\n4745,Benign\n4745,Nope\n")
    with pytest.raises(UnknownLabel, match="line 3"):
        D.load_dataset(p)
    p.write_text("hex_payload,label\n4745\n")
    with pytest.raises(MalformedRow) as exc:
        D.load_dataset(p)
    assert exc.value.line == 2


def test_thousand_row_file_histogram(tmp_path):
    spec = D.SyntheticSpec(counts={"Benign": 500, "DoS": 300, "Bot": 200})
    recs = D.generate_synthetic(spec, seed=3)
    path = tmp_path / "s.csv"
    D.write_dataset(recs, path)
    back = D.load_dataset(path)
    assert len(back) == 1000
    # independent tally straight from the file text
    labels = [line.rsplit(",", 1)[1] for line in path.read_text().splitlines()[1:]]
    assert labels.count("Benign") == 500 and labels.count("DoS") == 300 and labels.count("Bot") == 200
    assert D.class_histogram(back)[ClassLabel.DoS] == 300


def _records(counts):
    out = []
    for c, n in counts.items():
        out += [PayloadRecord(bytes([int(c), i % 256]), ClassLabel(c), f"{int(c)}:{i}") for i in range(n)]
    return out


def test_split_exact_ratio_single_class():
    split = D.stratified_split(_records({ClassLabel.DoS: 100}), seed=0)
    assert split.sizes() == (64, 16, 20)


def test_split_insufficient_class():
    with pytest.raises(InsufficientClassSamples):
        D.stratified_split(_records({ClassLabel.DoS: 10, ClassLabel.Bot: 2}), seed=0)


def test_split_ten_thousand_per_class_deviation():
    counts = {ClassLabel(c): n for c, n in enumerate([5000, 2400, 1200, 1000, 250, 80, 70])}
    split = D.stratified_split(_records(counts), seed=5)
    for part, r in zip((split.train, split.validation, split.test), (0.64, 0.16, 0.20)):
        hist = D.class_histogram(part)
        for c, n in counts.items():
            assert abs(hist[c] - n * r) <= 1


def test_split_reference_corpus_totals():
    tr, va, te = D._split_counts(list(D.CORPUS_TOTALS.values()), (0.64, 0.16, 0.20))
    assert (sum(tr), sum(va), sum(te)) == (657_692, 164_423, 205_529)
    for n, a, b, c in zip(D.CORPUS_TOTALS.values(), tr, va, te):
        assert abs(a - 0.64 * n) <= 1 and abs(b - 0.16 * n) <= 1 and abs(c - 0.20 * n) <= 1


@given(st.integers(0, 2**31 - 1), st.lists(st.integers(3, 40), min_size=1, max_size=7))
def test_split_partition_and_determinism(seed, sizes):
    recs = _records({ClassLabel(i): n for i, n in enumerate(sizes)})
    a = D.stratified_split(recs, seed=seed)
    b = D.stratified_split(recs, seed=seed)
    ids = [r.source_id for r in a.train + a.validation + a.test]
    assert sorted(ids) == sorted(r.source_id for r in recs)
    assert len(set(ids)) == len(ids)
    assert [r.source_id for r in a.test] == [r.source_id for r in b.test]
    total = len(recs)
    eps = len(sizes) / total
    assert abs(len(a.test) / total - 0.2) <= eps + 1.0 / total


def test_synthetic_motif_presence_and_determinism():
    motif = bytes.fromhex("deadbeef")
    spec = D.SyntheticSpec(counts={"DoS": 10}, motifs={"DoS": motif})
    recs = D.generate_synthetic(spec, seed=1)
    assert len(recs) == 10 and all(motif in r.payload for r in recs)
    assert [r.payload for r in recs] == [r.payload for r in D.generate_synthetic(spec, seed=1)]


def test_synthetic_zero_counts_and_scaled_reference_totals():
    assert D.generate_synthetic(D.SyntheticSpec(counts={c: 0 for c in ClassLabel}), 0) == []
    counts = D.scaled_corpus_counts(500)
    assert counts[ClassLabel.Benign] == 1056 and counts[ClassLabel.Web] == 3
    recs = D.generate_synthetic(D.SyntheticSpec(counts=counts, max_length=96), seed=2)
    assert D.class_histogram(recs) == counts


def test_synthetic_foreign_motifs_absent():
    recs = D.generate_synthetic(D.desk_spec(2000), seed=4)
    for r in recs:
        for c, m in D.DEFAULT_MOTIFS.items():
            assert (m in r.payload) == (c is r.label)


def test_synthetic_spec_validation():
    with pytest.raises(InvalidSpec):
        D.generate_synthetic(D.SyntheticSpec(counts={"DoS": 1}, motifs={"DoS": b"A" * 16},
                                             min_length=8, max_length=20), 0)
    with pytest.raises(InvalidSpec):
        D.SyntheticSpec(counts={"DoS": 1}, motifs={"Benign": b"abcd", "DoS": b"wxyz"}).validate()


def test_spec_json_round_trip():
    spec = D.desk_spec()
    back = D.SyntheticSpec.from_json(spec.to_json())
    assert back.counts == spec.counts and back.motifs == spec.motifs
