"""Embedding tables: Xavier-uniform initialization, a skip-gram Word2Vec
trainer (negative sampling), and the ``EMB1`` interchange file for externally
extracted matrices."""

from __future__ import annotations

import math
import os
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorruptEmbeddingFile, EmptyVocabulary, InvalidSelection
from .tokenize import TokenMap

EMB_MAGIC = b"EMB1"
_EMB_HEADER = struct.Struct("<4sIIB")


@dataclass
class EmbeddingMatrix:
    weights: np.ndarray
    frozen: bool = False
    provenance: str = "xavier"

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        if self.weights.ndim != 2:
            raise ValueError("embedding weights must be 2-D")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("embedding weights must be finite")

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    @property
    def shape(self):
        return self.weights.shape


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_uniform(shape, fan_in: int, fan_out: int, rng, dtype=np.float32) -> np.ndarray:
    """Uniform on ``[-b, b]`` with ``b = sqrt(6 / (fan_in + fan_out))``; the bound
    holds after the cast to ``dtype``."""
    b = xavier_bound(fan_in, fan_out)
    scalar = np.dtype(dtype).type
    w = rng.uniform(-b, b, size=shape).astype(dtype)
    bd = scalar(b)
    if float(bd) > b:
        bd = np.nextafter(bd, scalar(0))
    return np.clip(w, -bd, bd)


def xavier_init(vocab_size: int, dim: int, seed: int = 0, dtype=np.float32) -> EmbeddingMatrix:
    if vocab_size < 1 or dim < 1:
        raise ValueError("vocab_size and dim must be >= 1")
    rng = np.random.default_rng(seed)
    w = xavier_uniform((vocab_size, dim), vocab_size, dim, rng, dtype)
    return EmbeddingMatrix(w, frozen=False, provenance="xavier")


def random_normal_init(vocab_size: int, dim: int, seed: int = 0, std: float = 1.0,
                       dtype=np.float32) -> EmbeddingMatrix:
    """N(0, std^2) table; the comparison baseline for Xavier initialization."""
    rng = np.random.default_rng(seed)
    return EmbeddingMatrix(rng.normal(0.0, std, size=(vocab_size, dim)).astype(dtype),
                           frozen=False, provenance="normal")


# --------------------------------------------------------------------------
# Word2Vec


@dataclass(frozen=True)
class Word2VecParams:
    dim: int = 64
    window: int = 5
    min_count: int = 5
    negative: int = 5
    epochs: int = 5
    lr: float = 0.025
    min_lr: float = 1e-4
    batch_pairs: int = 2048
    sg: bool = True  # skip-gram is the only mode implemented

    def __post_init__(self):
        if self.dim <= 0 or self.window < 1 or self.min_count < 1:
            raise ValueError("need dim > 0, window >= 1, min_count >= 1")
        if not self.sg:
            raise ValueError("only the skip-gram mode is implemented")


@dataclass
class Word2VecVocab:
    """Frequency-ordered vocabulary; ``tokens[i]`` has ID ``i + 1`` (0 is padding)."""

    tokens: list
    counts: list

    def __post_init__(self):
        self.index = {t: i + 1 for i, t in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __getitem__(self, token) -> int:
        return self.index.get(token, 0)

    def token_map(self) -> TokenMap:
        """Byte map for byte-valued tokens; bytes under min_count map to padding."""
        return TokenMap(np.array([self.index.get(b, 0) for b in range(256)]), 0, provenance="word2vec")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for t, c in zip(self.tokens, self.counts):
                key = f"{t:02x}" if isinstance(t, (int, np.integer)) else str(t)
                fh.write(f"{key}\t{self.index[t]}\t{c}\n")

    @classmethod
    def load(cls, path) -> "Word2VecVocab":
        tokens, counts = [], []
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    key, _, count = line.rstrip("\n").split("\t")
                    tokens.append(int(key, 16))
                    counts.append(int(count))
        return cls(tokens, counts)


def build_vocab(corpus: Iterable[Sequence], min_count: int) -> Word2VecVocab:
    counter = Counter()
    for seq in corpus:
        counter.update(seq)
    kept = [(t, c) for t, c in counter.items() if c >= min_count]
    if not kept:
        raise EmptyVocabulary(f"no token occurs at least {min_count} times")
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Word2VecVocab([t for t, _ in kept], [c for _, c in kept])


def _window_pairs(ids: np.ndarray, window: int):
    centers, contexts = [], []
    for o in range(1, window + 1):
        if len(ids) <= o:
            break
        centers += [ids[:-o], ids[o:]]
        contexts += [ids[o:], ids[:-o]]
    if not centers:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    return np.concatenate(centers), np.concatenate(contexts)


def train_word2vec(corpus: Sequence[Sequence], params: Word2VecParams = Word2VecParams(),
                   seed: int = 0, dtype=np.float32):
    """Skip-gram with negative sampling over ``(center, context)`` pairs.

    Returns the vocabulary and an embedding matrix with ``len(vocab) + 1`` rows
    whose row 0 (padding) is all zeros. Pairs are processed in shuffled
    mini-batches of ``params.batch_pairs`` with the learning rate decaying
    linearly from ``lr`` to ``min_lr``. Single-threaded and deterministic.
    """
    corpus = [list(s) for s in corpus]
    if not corpus or not any(corpus):
        raise EmptyVocabulary("empty corpus")
    vocab = build_vocab(corpus, params.min_count)
    rng = np.random.default_rng(seed)
    V, D = len(vocab) + 1, params.dim

    w_in = ((rng.random((V, D)) - 0.5) / D).astype(np.float64)
    w_in[0] = 0.0
    w_out = np.zeros((V, D), dtype=np.float64)

    freq = np.zeros(V)
    freq[1:] = np.asarray(vocab.counts, dtype=np.float64) ** 0.75
    noise_cdf = np.cumsum(freq / freq.sum())

    encoded = []
    for seq in corpus:
        ids = np.fromiter((vocab[t] for t in seq), dtype=np.int64, count=len(seq))
        encoded.append(ids[ids > 0])  # out-of-vocabulary tokens are dropped
    pairs_per_epoch = sum(
        2 * max(len(ids) - o, 0) for ids in encoded for o in range(1, params.window + 1)
    )
    total = max(pairs_per_epoch * params.epochs, 1)
    done = 0

    chunk_sents = 256
    for _ in range(params.epochs):
        order = rng.permutation(len(encoded))
        for start in range(0, len(order), chunk_sents):
            cs, xs = [], []
            for si in order[start:start + chunk_sents]:
                c, x = _window_pairs(encoded[si], params.window)
                cs.append(c)
                xs.append(x)
            centers = np.concatenate(cs)
            contexts = np.concatenate(xs)
            perm = rng.permutation(len(centers))
            centers, contexts = centers[perm], contexts[perm]
            for b in range(0, len(centers), params.batch_pairs):
                c = centers[b:b + params.batch_pairs]
                x = contexts[b:b + params.batch_pairs]
                n = len(c)
                lr = params.lr - (params.lr - params.min_lr) * (done / total)
                done += n
                neg = np.searchsorted(noise_cdf, rng.random((n, params.negative)), side="right")
                neg = np.clip(neg, 1, V - 1)
                targets = np.concatenate([x[:, None], neg], axis=1)
                labels = np.zeros(targets.shape)
                labels[:, 0] = 1.0
                h = w_in[c]
                u = w_out[targets]
                score = np.einsum("nd,nkd->nk", h, u)
                sig = 1.0 / (1.0 + np.exp(-np.clip(score, -30, 30)))
                g = (labels - sig) * lr
                np.add.at(w_out, targets.reshape(-1), (g[:, :, None] * h[:, None, :]).reshape(-1, D))
                np.add.at(w_in, c, np.einsum("nk,nkd->nd", g, u))
    w_in[0] = 0.0
    return vocab, EmbeddingMatrix(w_in.astype(dtype), frozen=False, provenance="word2vec")


# --------------------------------------------------------------------------
# EMB1 files


def save_embeddings(matrix: EmbeddingMatrix | np.ndarray, path, frozen: bool | None = None) -> None:
    """Write ``EMB1``, u32 rows, u32 dim, u8 frozen flag, then little-endian f32 rows."""
    if isinstance(matrix, EmbeddingMatrix):
        w, flag = matrix.weights, matrix.frozen if frozen is None else frozen
    else:
        w, flag = np.asarray(matrix), bool(frozen)
    rows, dim = w.shape
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMB_MAGIC, rows, dim, 1 if flag else 0))
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def load_external_embeddings(path, selected_ids: Sequence[int] | None = None) -> EmbeddingMatrix:
    """Read an ``EMB1`` file, optionally keeping only ``selected_ids``.

    A 257-long selection is taken row for row (e.g. ``TokenMap.selection()``:
    pad first, then bytes 0x00..0xff). A 256-long selection lists the byte
    rows only and a zero padding row is placed in front. Only selected rows
    are read from disk.
    """
    path = Path(path)
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(_EMB_HEADER.size)
    if len(head) < _EMB_HEADER.size:
        raise CorruptEmbeddingFile(f"{path.name}: file shorter than header")
    magic, rows, dim, frozen = _EMB_HEADER.unpack(head)
    if magic != EMB_MAGIC:
        raise CorruptEmbeddingFile(f"{path.name}: bad magic {magic!r}")
    expected = _EMB_HEADER.size + rows * dim * 4
    if size != expected:
        raise CorruptEmbeddingFile(f"{path.name}: header declares {rows}x{dim} ({expected} bytes), file has {size}")
    table = np.memmap(path, dtype="<f4", mode="r", offset=_EMB_HEADER.size, shape=(rows, dim))
    if selected_ids is None:
        w = np.array(table, dtype=np.float32)
    else:
        sel = np.asarray(list(selected_ids), dtype=np.int64)
        if sel.size and (sel.min() < 0 or sel.max() >= rows):
            raise InvalidSelection(f"selected ids must lie in [0, {rows})")
        w = np.asarray(table[sel], dtype=np.float32)
        if len(sel) == 256:
            w = np.vstack([np.zeros((1, dim), dtype=np.float32), w])
    del table
    return EmbeddingMatrix(w, frozen=bool(frozen), provenance="external")
