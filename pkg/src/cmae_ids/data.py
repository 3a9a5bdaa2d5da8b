"""Labeled payload datasets: hex parsing, CSV/JSONL I/O, synthetic corpora and
stratified train/validation/test splitting."""

from __future__ import annotations

import csv
import enum
import io
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    InsufficientClassSamples,
    InvalidHexDigit,
    InvalidHexLength,
    InvalidSpec,
    MalformedRow,
    UnknownLabel,
)


class ClassLabel(enum.IntEnum):
    Benign = 0
    DoS = 1
    DDoS = 2
    PortScan = 3
    BruteForce = 4
    Bot = 5
    Web = 6

    @classmethod
    def parse(cls, text: str) -> "ClassLabel":
        """Case-insensitive lookup; spaces, underscores and dashes are ignored,
        so "Port Scan", "port_scan" and "PORTSCAN" all resolve to PortScan."""
        key = re.sub(r"[\s_\-]+", "", str(text)).lower()
        try:
            return _LABEL_KEYS[key]
        except KeyError:
            raise UnknownLabel(f"unknown class label {text!r}") from None

    @property
    def display_name(self) -> str:
        return _DISPLAY[self]

    @property
    def is_attack(self) -> bool:
        return self is not ClassLabel.Benign


_LABEL_KEYS = {c.name.lower(): c for c in ClassLabel}
_DISPLAY = {
    ClassLabel.Benign: "Benign",
    ClassLabel.DoS: "DoS",
    ClassLabel.DDoS: "DDoS",
    ClassLabel.PortScan: "Port Scan",
    ClassLabel.BruteForce: "Brute Force",
    ClassLabel.Bot: "Bot",
    ClassLabel.Web: "Web",
}

NUM_CLASSES = len(ClassLabel)
ATTACK_CLASSES = tuple(c for c in ClassLabel if c.is_attack)

# Per-class totals of the CIC-IDS2017 subset used for the published results.
CORPUS_TOTALS = {
    ClassLabel.Benign: 528_265,
    ClassLabel.DoS: 250_706,
    ClassLabel.DDoS: 124_111,
    ClassLabel.PortScan: 107_778,
    ClassLabel.BruteForce: 13_231,
    ClassLabel.Bot: 1_905,
    ClassLabel.Web: 1_648,
}


@dataclass(frozen=True)
class PayloadRecord:
    payload: bytes
    label: ClassLabel
    source_id: str = ""


@dataclass(frozen=True)
class UnlabeledRecord:
    """Payload pulled out of a capture; no label, but traceable to its packet."""

    payload: bytes
    packet_index: int
    five_tuple: str


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    seed: int
    ratios: tuple = (0.64, 0.16, 0.20)

    def sizes(self) -> tuple:
        return len(self.train), len(self.validation), len(self.test)


# --------------------------------------------------------------------------
# hex

_NON_HEX = re.compile(r"[^0-9a-fA-F]")


def parse_hex_payload(hex_string: str) -> bytes:
    """Decode a hex-encoded payload.

    >>> parse_hex_payload("474554")
    b'GET'
    """
    if len(hex_string) % 2:
        raise InvalidHexLength(f"hex payload has odd length {len(hex_string)}")
    bad = _NON_HEX.search(hex_string)
    if bad is not None:
        raise InvalidHexDigit(bad.start(), bad.group())
    return bytes.fromhex(hex_string)


def bytes_to_hex(payload: bytes) -> str:
    return bytes(payload).hex()


# --------------------------------------------------------------------------
# dataset files

CSV_HEADER = ("hex_payload", "label")


def _record_from_fields(hex_payload, label, line: int, source: str) -> PayloadRecord:
    if hex_payload is None or label is None:
        raise MalformedRow(line, "missing hex_payload or label")
    try:
        payload = parse_hex_payload(hex_payload.strip())
    except InvalidHexLength as exc:
        raise InvalidHexLength(f"line {line}: {exc}") from None
    except InvalidHexDigit as exc:
        err = InvalidHexDigit(exc.offset, exc.char)
        err.args = (f"line {line}: {exc}",)
        raise err from None
    try:
        cls = ClassLabel.parse(label)
    except UnknownLabel as exc:
        raise UnknownLabel(f"line {line}: {exc}") from None
    return PayloadRecord(payload, cls, f"{source}:{line}")


def load_dataset(path, format: str | None = None) -> list:
    """Read ``hex_payload,label`` rows from a CSV or JSONL file, in file order.

    Errors carry the 1-based line number of the offending row.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("csv", "jsonl"):
        raise ValueError(f"unsupported dataset format {fmt!r}")
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        if fmt == "csv":
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                return records
            header = [h.strip() for h in header]
            if not set(CSV_HEADER) <= set(header):
                raise MalformedRow(1, f"header must contain {','.join(CSV_HEADER)}")
            hi, li = header.index("hex_payload"), header.index("label")
            for row in reader:
                line = reader.line_num
                if not row:
                    continue
                if len(row) != len(header):
                    raise MalformedRow(line, f"expected {len(header)} fields, got {len(row)}")
                records.append(_record_from_fields(row[hi], row[li], line, path.name))
        else:
            for line, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                try:
                    obj = json.loads(text)
                except json.JSONDecodeError as exc:
                    raise MalformedRow(line, f"invalid JSON ({exc.msg})") from None
                if not isinstance(obj, dict):
                    raise MalformedRow(line, "expected a JSON object")
                records.append(
                    _record_from_fields(obj.get("hex_payload"), obj.get("label"), line, path.name)
                )
    return records


def write_dataset(records: Iterable[PayloadRecord], path, format: str | None = None) -> None:
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".") or "csv").lower()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if fmt == "jsonl":
            for r in records:
                fh.write(json.dumps({"hex_payload": r.payload.hex(), "label": r.label.name}) + "\n")
        else:
            fh.write(",".join(CSV_HEADER) + "\n")
            for r in records:
                fh.write(f"{r.payload.hex()},{r.label.name}\n")


def class_histogram(records: Iterable) -> dict:
    hist = {c: 0 for c in ClassLabel}
    for r in records:
        hist[r.label] += 1
    return hist


# --------------------------------------------------------------------------
# stratified splitting


def _ceil(x: float) -> int:
    # absorbs float fuzz such as 0.2 * 100 == 20.000000000000004
    return math.ceil(round(x, 6))


def _split_counts(sizes: Sequence[int], ratios) -> tuple:
    """Per-class (train, validation, test) counts.

    Split totals follow two chained holdout splits (test first, then
    validation out of the remainder), each sized with ceil as usual for
    holdout splitting. Per-class counts are the floor/ceil rounding of the
    requested proportions that hits those totals while keeping every class
    within one record of its expected share in every split.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    r_train, r_val, r_test = ratios
    n = int(sizes.sum())
    t_test = _ceil(r_test * n)
    t_val = _ceil(r_val / (r_train + r_val) * (n - t_test))

    q_test = sizes * r_test
    q_val = sizes * r_val
    q_train = sizes * r_train
    test_opts = [sorted({math.floor(q), math.ceil(q)}) for q in q_test]
    val_opts = [sorted({math.floor(q), math.ceil(q)}) for q in q_val]

    best, best_cost = None, None
    for test_c in itertools.product(*test_opts):
        if sum(test_c) != t_test:
            continue
        test_c = np.asarray(test_c)
        chained_val = (sizes - test_c) * (r_val / (r_train + r_val))
        for val_c in itertools.product(*val_opts):
            if sum(val_c) != t_val:
                continue
            val_c = np.asarray(val_c)
            train_c = sizes - test_c - val_c
            if np.any(train_c < 0) or np.any(np.abs(train_c - q_train) > 1 + 1e-9):
                continue
            cost = float(np.sum((test_c - q_test) ** 2) + np.sum((val_c - chained_val) ** 2))
            if best_cost is None or cost < best_cost - 1e-12:
                best, best_cost = (train_c, val_c, test_c), cost
    if best is not None:
        return tuple(tuple(int(v) for v in arr) for arr in best)

    # No rounding satisfies every bound; fall back to largest remainders.
    def largest_remainder(quota, total):
        base = np.floor(quota).astype(np.int64)
        order = np.argsort(-(quota - base), kind="stable")
        base[order[: total - int(base.sum())]] += 1
        return base

    test_c = largest_remainder(q_test, t_test)
    val_c = largest_remainder((sizes - test_c) * (r_val / (r_train + r_val)), t_val)
    train_c = sizes - test_c - val_c
    return tuple(int(v) for v in train_c), tuple(int(v) for v in val_c), tuple(int(v) for v in test_c)


def stratified_split(records: Sequence, ratios=(0.64, 0.16, 0.20), seed: int = 0) -> DatasetSplit:
    """Split records into train/validation/test, preserving class proportions.

    Each class is shuffled independently with a generator derived from
    ``seed`` and then sliced; output lists keep the input's relative order.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive fractions summing to 1, got {ratios}")
    by_class = {}
    for i, r in enumerate(records):
        by_class.setdefault(r.label, []).append(i)
    classes = sorted(by_class)
    for c in classes:
        if len(by_class[c]) < 3:
            raise InsufficientClassSamples(
                f"class {ClassLabel(c).name} has {len(by_class[c])} samples; at least 3 required"
            )
    if not classes:
        return DatasetSplit([], [], [], seed, ratios)

    train_n, val_n, test_n = _split_counts([len(by_class[c]) for c in classes], ratios)
    assign = np.empty(len(records), dtype=np.int8)
    rng = np.random.default_rng(seed)
    for c, n_tr, n_va, n_te in zip(classes, train_n, val_n, test_n):
        idx = np.asarray(by_class[c])
        perm = idx[rng.permutation(len(idx))]
        assign[perm[:n_te]] = 2
        assign[perm[n_te:n_te + n_va]] = 1
        assign[perm[n_te + n_va:]] = 0
    parts = ([], [], [])
    for r, a in zip(records, assign):
        parts[a].append(r)
    return DatasetSplit(parts[0], parts[1], parts[2], seed, ratios)


# --------------------------------------------------------------------------
# synthetic corpora

DEFAULT_MOTIFS = {
    ClassLabel.DoS: bytes.fromhex("deadbeef5a17"),
    ClassLabel.DDoS: bytes.fromhex("0ddba11c0ffee0"),
    ClassLabel.PortScan: bytes.fromhex("5ca9feed"),
    ClassLabel.BruteForce: bytes.fromhex("b00b1e5c4a7d"),
    ClassLabel.Bot: bytes.fromhex("b07b07facade"),
    ClassLabel.Web: bytes.fromhex("3c7363726970743e"),  # "<script>"
}


@dataclass
class SyntheticSpec:
    """Recipe for a motif-planted corpus: uniform random bytes with each attack
    class's signature inserted at random offsets. Benign gets no motif."""

    counts: Mapping
    motifs: Mapping = field(default_factory=lambda: dict(DEFAULT_MOTIFS))
    min_length: int = 64
    max_length: int = 256
    insertions: int = 1

    def __post_init__(self):
        self.counts = {ClassLabel.parse(k) if isinstance(k, str) else ClassLabel(k): int(v)
                       for k, v in self.counts.items()}
        self.motifs = {ClassLabel.parse(k) if isinstance(k, str) else ClassLabel(k): bytes(v)
                       for k, v in self.motifs.items()}

    def validate(self) -> None:
        if any(v < 0 for v in self.counts.values()):
            raise InvalidSpec("sample counts must be non-negative")
        if self.insertions < 1:
            raise InvalidSpec("motif insertion count must be at least 1")
        if not 0 < self.min_length <= self.max_length:
            raise InvalidSpec("need 0 < min_length <= max_length")
        if ClassLabel.Benign in self.motifs:
            raise InvalidSpec("Benign must not have a motif")
        for c, n in self.counts.items():
            if n and c.is_attack and c not in self.motifs:
                raise InvalidSpec(f"class {c.name} has samples but no motif")
        for c, m in self.motifs.items():
            if not 4 <= len(m) <= 16:
                raise InvalidSpec(f"motif for {c.name} must be 4-16 bytes, got {len(m)}")
            if len(m) * self.insertions > self.min_length:
                raise InvalidSpec(
                    f"motif for {c.name} ({len(m)} bytes x {self.insertions}) longer than min_length"
                )
        for (a, ma), (b, mb) in itertools.permutations(self.motifs.items(), 2):
            if ma in mb:
                raise InvalidSpec(f"motif of {a.name} is a substring of {b.name}'s motif")

    def to_json(self) -> str:
        return json.dumps(
            {
                "counts": {c.name: n for c, n in self.counts.items()},
                "motifs": {c.name: m.hex() for c, m in self.motifs.items()},
                "min_length": self.min_length,
                "max_length": self.max_length,
                "insertions": self.insertions,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        obj = json.loads(text)
        motifs = obj.get("motifs")
        return cls(
            counts=obj["counts"],
            motifs={k: bytes.fromhex(v) for k, v in motifs.items()} if motifs is not None
            else dict(DEFAULT_MOTIFS),
            min_length=int(obj.get("min_length", 64)),
            max_length=int(obj.get("max_length", 256)),
            insertions=int(obj.get("insertions", 1)),
        )


def scaled_corpus_counts(divisor: int) -> dict:
    """Reference corpus class totals scaled down by ``divisor`` (floored)."""
    return {c: n // divisor for c, n in CORPUS_TOTALS.items()}


def desk_spec(divisor: int = 73, **kwargs) -> SyntheticSpec:
    """Roughly 14k records with the CIC-IDS2017 class imbalance."""
    return SyntheticSpec(counts=scaled_corpus_counts(divisor), **kwargs)


def _contains_any(buf: bytes, motifs: Iterable[bytes]) -> bool:
    return any(m in buf for m in motifs)


def generate_synthetic(spec: SyntheticSpec, seed: int = 0) -> list:
    """Generate a shuffled motif corpus; deterministic for a fixed seed."""
    spec.validate()
    rng = np.random.default_rng(seed)
    records = []
    for cls in ClassLabel:
        n = spec.counts.get(cls, 0)
        motif = spec.motifs.get(cls)
        foreign = [m for c, m in spec.motifs.items() if c is not cls]
        for i in range(n):
            length = int(rng.integers(spec.min_length, spec.max_length + 1))
            while True:
                buf = bytearray(rng.integers(0, 256, size=length, dtype=np.uint8).tobytes())
                if motif is not None:
                    k = spec.insertions
                    # non-overlapping offsets: choose k slots in the slack, then spread
                    slack = length - k * len(motif)
                    starts = np.sort(rng.choice(slack + k, size=k, replace=False))
                    for j, s in enumerate(starts):
                        off = int(s - j + j * len(motif))
                        buf[off:off + len(motif)] = motif
                buf = bytes(buf)
                if not _contains_any(buf, foreign):
                    break
            records.append(PayloadRecord(buf, cls, f"synthetic:{cls.name}:{i}"))
    order = rng.permutation(len(records))
    return [records[i] for i in order]


def records_to_csv_text(records: Iterable[PayloadRecord]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for r in records:
        buf.write(f"{r.payload.hex()},{r.label.name}\n")
    return buf.getvalue()
