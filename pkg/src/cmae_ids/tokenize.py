"""Payload tokenizers.

Byte-level schemes (Hex2Int, Hex2Tok, Word2Vec vocabulary) map every payload
byte through a 256-entry :class:`TokenMap`. The sub-word scheme segments a
byte stream greedily against a supplied vocabulary with single-byte fallback.
"""

from __future__ import annotations

import codecs
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidTokenMap, UnknownToken

# Configurable sequence lengths; "max" pads each batch to its longest member.
MAX_LEN_CHOICES = (1500, 3000, "max")


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    true_length: int
    pad_id: int
    max_len: int | None

    def __post_init__(self):
        if self.max_len is not None and len(self.ids) != self.max_len:
            raise ValueError("ids length must equal max_len")
        if self.true_length > len(self.ids):
            raise ValueError("true_length exceeds sequence length")

    def __len__(self):
        return len(self.ids)

    def tolist(self) -> list:
        return [int(i) for i in self.ids]


@dataclass(frozen=True)
class TokenMap:
    """Byte -> token ID table (256 entries) plus the padding ID.

    For ``provenance == "word2vec"`` bytes under the vocabulary's min-count
    threshold are mapped to ``pad_id``; all other entries must be distinct and
    differ from ``pad_id``.
    """

    table: np.ndarray
    pad_id: int
    provenance: str = "hex2int"
    _inverse: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.int64)
        if table.shape != (256,):
            raise InvalidTokenMap(f"token map needs exactly 256 byte entries, got {table.shape[0]}")
        if table.min() < 0 or self.pad_id < 0:
            raise InvalidTokenMap("token IDs must be non-negative")
        known = table[table != self.pad_id]
        if self.provenance != "word2vec" and len(known) != 256:
            raise InvalidTokenMap("padding ID collides with a byte entry")
        if len(np.unique(known)) != len(known):
            raise InvalidTokenMap("token map is not injective")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)
        inv = {int(t): b for b, t in enumerate(table) if t != self.pad_id}
        object.__setattr__(self, "_inverse", inv)

    def __getitem__(self, byte: int) -> int:
        return int(self.table[byte])

    @property
    def vocab_size(self) -> int:
        """Rows an embedding matrix needs to index every ID in this map."""
        return int(max(self.table.max(), self.pad_id)) + 1

    def selection(self) -> list:
        """Source rows for compacting an external embedding matrix:
        ``[pad, id(0x00), ..., id(0xff)]``."""
        return [self.pad_id] + [int(t) for t in self.table]

    def compacted(self) -> "TokenMap":
        """The equivalent map after compaction via :meth:`selection` (Hex2Int layout)."""
        return TokenMap(np.arange(1, 257), 0, provenance=f"{self.provenance}+compact")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b, t in enumerate(self.table):
                fh.write(f"{b:02x}\t{int(t)}\n")
            fh.write(f"PAD\t{self.pad_id}\n")


def hex2int_map() -> TokenMap:
    """Byte ``b`` -> ``b + 1``; ID 0 is padding (vocabulary of 257)."""
    return TokenMap(np.arange(1, 257, dtype=np.int64), 0, provenance="hex2int")


def load_hex2tok_map(path, provenance: str | None = None) -> TokenMap:
    """Read a ``xx<TAB>id`` byte map with one ``PAD<TAB>id`` line."""
    path = Path(path)
    table = {}
    pad = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise InvalidTokenMap(f"{path.name}:{lineno}: expected '<hex>\\t<id>'")
            key, value = parts
            try:
                tid = int(value)
            except ValueError:
                raise InvalidTokenMap(f"{path.name}:{lineno}: bad token id {value!r}") from None
            if key.upper() == "PAD":
                if pad is not None:
                    raise InvalidTokenMap(f"{path.name}:{lineno}: duplicate PAD line")
                pad = tid
                continue
            if not re.fullmatch(r"[0-9a-fA-F]{2}", key):
                raise InvalidTokenMap(f"{path.name}:{lineno}: bad byte {key!r}")
            b = int(key, 16)
            if b in table:
                raise InvalidTokenMap(f"{path.name}:{lineno}: duplicate byte {key}")
            table[b] = tid
    if pad is None:
        raise InvalidTokenMap(f"{path.name}: missing PAD line")
    if len(table) != 256:
        missing = sorted(set(range(256)) - set(table))
        raise InvalidTokenMap(f"{path.name}: {len(table)} byte entries, missing {missing[:4]}...")
    return TokenMap(np.array([table[b] for b in range(256)]), pad, provenance or f"external:{path.stem}")


def _fit(ids: np.ndarray, pad_id: int, max_len: int | None) -> TokenSequence:
    if max_len is None:
        return TokenSequence(ids, len(ids), pad_id, None)
    n = min(len(ids), max_len)
    out = np.full(max_len, pad_id, dtype=np.int64)
    out[:n] = ids[:n]
    return TokenSequence(out, n, pad_id, max_len)


def encode_bytes(payload: bytes, token_map: TokenMap, max_len: int | None = None) -> TokenSequence:
    """Map each byte through ``token_map``, then pad or truncate to ``max_len``
    (``None`` keeps the natural length)."""
    raw = np.frombuffer(bytes(payload), dtype=np.uint8)
    return _fit(token_map.table[raw], token_map.pad_id, max_len)


def decode(seq: TokenSequence | Sequence[int], token_map: TokenMap) -> bytes:
    """Invert :func:`encode_bytes`; padding IDs are dropped."""
    if isinstance(seq, TokenSequence):
        ids = seq.ids[: seq.true_length]
    else:
        ids = [i for i in seq if i != token_map.pad_id]
    out = bytearray()
    inv = token_map._inverse
    for t in ids:
        try:
            out.append(inv[int(t)])
        except KeyError:
            raise UnknownToken(f"token id {int(t)} is not produced by this map") from None
    return bytes(out)


# --------------------------------------------------------------------------
# sub-word


@dataclass(frozen=True)
class SubwordModel:
    """Greedy longest-match segmenter over a token vocabulary.

    ``byte_fallback`` supplies an ID for single bytes absent from
    ``vocabulary``; together they must cover all 256 byte values.
    """

    vocabulary: dict
    pad_id: int
    byte_fallback: dict = field(default_factory=dict)
    vocab_size: int | None = None

    def __post_init__(self):
        vocab = {bytes(k): int(v) for k, v in self.vocabulary.items()}
        fallback = {int(k): int(v) for k, v in self.byte_fallback.items()}
        if b"" in vocab:
            raise InvalidTokenMap("empty token in vocabulary")
        for b in range(256):
            if bytes([b]) not in vocab and b not in fallback:
                raise InvalidTokenMap(f"byte 0x{b:02x} has neither a vocabulary entry nor a fallback")
        all_ids = list(vocab.values()) + list(fallback.values()) + [self.pad_id]
        size = self.vocab_size if self.vocab_size is not None else max(all_ids) + 1
        if min(all_ids) < 0 or max(all_ids) >= size:
            raise InvalidTokenMap(f"token IDs must lie in [0, {size})")
        object.__setattr__(self, "vocabulary", vocab)
        object.__setattr__(self, "byte_fallback", fallback)
        object.__setattr__(self, "vocab_size", size)
        object.__setattr__(self, "_longest", max(len(k) for k in vocab) if vocab else 1)

    def segment(self, data: bytes) -> list:
        """Split ``data`` into vocabulary pieces (single bytes where nothing matches)."""
        vocab, longest = self.vocabulary, self._longest
        pieces = []
        i, n = 0, len(data)
        while i < n:
            for width in range(min(longest, n - i), 0, -1):
                piece = data[i:i + width]
                if piece in vocab:
                    break
            else:
                piece = data[i:i + 1]
            pieces.append(piece)
            i += len(piece)
        return pieces

    def piece_id(self, piece: bytes) -> int:
        tid = self.vocabulary.get(piece)
        return tid if tid is not None else self.byte_fallback[piece[0]]


def encode_subword(payload: bytes, model: SubwordModel, max_len: int | None = None) -> TokenSequence:
    ids = np.array([model.piece_id(p) for p in model.segment(bytes(payload))], dtype=np.int64)
    return _fit(ids, model.pad_id, max_len)


_FALLBACK = re.compile(r"<0x([0-9A-Fa-f]{2})>")


def load_subword_vocab(path, pad_id: int | None = None, vocab_size: int | None = None) -> SubwordModel:
    """Read ``<escaped-bytes><TAB>id`` lines.

    Tokens use Python bytes-literal escapes (``\\x00``, ``\\t``, ``\\\\``).
    ``<0xNN>`` lines declare byte-fallback IDs and ``<pad>`` the padding ID.
    """
    path = Path(path)
    vocab, fallback = {}, {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            token, sep, value = line.rpartition("\t")
            if not sep:
                raise InvalidTokenMap(f"{path.name}:{lineno}: expected '<token>\\t<id>'")
            tid = int(value)
            if token == "<pad>":
                pad_id = tid if pad_id is None else pad_id
                continue
            m = _FALLBACK.fullmatch(token)
            if m:
                fallback[int(m.group(1), 16)] = tid
                continue
            raw = codecs.escape_decode(token.encode("utf-8"))[0]
            if raw in vocab:
                raise InvalidTokenMap(f"{path.name}:{lineno}: duplicate token {token!r}")
            vocab[raw] = tid
    if pad_id is None:
        raise InvalidTokenMap(f"{path.name}: no padding ID (add a '<pad>' line)")
    return SubwordModel(vocab, pad_id, fallback, vocab_size)


def escape_token(piece: bytes) -> str:
    """Inverse of the vocabulary-file escaping."""
    return "".join(
        chr(b) if 0x20 <= b < 0x7F and b != 0x5C else ("\\\\" if b == 0x5C else f"\\x{b:02x}")
        for b in piece
    )


# --------------------------------------------------------------------------
# batch front-end used by training and inference


class Tokenizer:
    """Encodes payload batches into ``[batch, length]`` ID matrices.

    ``kind`` is ``"bytes"`` (any :class:`TokenMap`) or ``"subword"``. The
    sub-word path tokenizes the payload's hex text (``b"00c1b1..."``) when
    ``hex_text`` is set, mirroring how string payloads reach an LLM tokenizer.
    """

    def __init__(self, token_map: TokenMap | None = None, subword: SubwordModel | None = None,
                 hex_text: bool = True, name: str | None = None):
        if (token_map is None) == (subword is None):
            raise ValueError("give exactly one of token_map or subword")
        self.token_map = token_map
        self.subword = subword
        self.hex_text = hex_text
        self.name = name or (token_map.provenance if token_map is not None else "subword")

    @property
    def pad_id(self) -> int:
        return self.token_map.pad_id if self.token_map is not None else self.subword.pad_id

    @property
    def vocab_size(self) -> int:
        return self.token_map.vocab_size if self.token_map is not None else self.subword.vocab_size

    def encode(self, payload: bytes, max_len: int | None = None) -> TokenSequence:
        if self.token_map is not None:
            return encode_bytes(payload, self.token_map, max_len)
        data = bytes(payload).hex().encode("ascii") if self.hex_text else bytes(payload)
        return encode_subword(data, self.subword, max_len)

    def encode_batch(self, payloads: Iterable[bytes], max_len=None, min_len: int = 1) -> np.ndarray:
        """``max_len`` may be an int, ``None`` or ``"max"`` (both meaning the
        longest sequence in this batch). Rows are right-padded."""
        if max_len == "max":
            max_len = None
        seqs = [self.encode(p, max_len) for p in payloads]
        width = max_len if max_len is not None else max([len(s) for s in seqs] + [min_len])
        width = max(width, min_len)
        out = np.full((len(seqs), width), self.pad_id, dtype=np.int64)
        for i, s in enumerate(seqs):
            out[i, : len(s.ids)] = s.ids
        return out
