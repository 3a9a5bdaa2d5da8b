"""The CMAE classifier: two Convolutional Attention Blocks (CAB), one
Multi-Kernel Block (MKB) and a gated ensemble head, each block reading the
token batch through its own embedding table."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import nncore as nn
from .data import NUM_CLASSES
from .embed import EmbeddingMatrix, random_normal_init, xavier_init, xavier_uniform
from .errors import ConfigError

# Two stride-2 pools need at least four positions.
MIN_SEQ_LEN = 4


@dataclass
class CmaeConfig:
    max_len: object = 1500  # int or "max"
    vocab_size: int = 257
    embedding_dim: int = 64
    d_model: int = 64
    heads: int = 2
    cab_filters: tuple = (128, 64)
    cab_kernel: int = 3
    mkb_kernels: tuple = (3, 4, 5)
    mkb_filters: int = 128
    # Feed-forward widths are not published; these two values are the unique
    # integer pair that reproduces the published 410,823 parameter total.
    attn_ffn_hidden: int = 208
    mkb_ffn_hidden: int = 160
    classes: int = NUM_CLASSES
    dropout: float = 0.25
    embeddings_frozen: bool = False
    embedding_source: str = "xavier"  # xavier | normal | word2vec | external
    pad_id: int = 0

    def __post_init__(self):
        self.cab_filters = tuple(int(v) for v in self.cab_filters)
        self.mkb_kernels = tuple(int(v) for v in self.mkb_kernels)
        if self.max_len != "max":
            self.max_len = int(self.max_len)

    def validate(self) -> None:
        if self.heads < 1 or self.d_model % self.heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by heads {self.heads}")
        if self.classes != NUM_CLASSES:
            raise ConfigError(f"classes must be {NUM_CLASSES}")
        if len(self.cab_filters) != 2 or self.cab_filters[1] != self.d_model:
            raise ConfigError("cab_filters must be (c1, d_model): attention runs on the second conv output")
        if self.cab_kernel % 2 == 0:
            raise ConfigError("CAB kernel must be odd")
        if min(self.mkb_kernels) < 1 or self.mkb_filters < 1:
            raise ConfigError("bad MKB kernels/filters")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.max_len != "max" and self.max_len < 1:
            raise ConfigError("max_len must be positive or 'max'")
        if not 0 <= self.pad_id < self.vocab_size:
            raise ConfigError("pad_id outside the vocabulary")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CmaeConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)


def xavier_cmae_config(**overrides) -> CmaeConfig:
    return CmaeConfig(**overrides)


def llm_hex2tok_config(frozen: bool = True, **overrides) -> CmaeConfig:
    """Compacted 257-row LLM embedding (4096-dim) in place of the Xavier table."""
    base = dict(embedding_dim=4096, embeddings_frozen=frozen, embedding_source="external")
    base.update(overrides)
    return CmaeConfig(**base)


def desk_config(**overrides) -> CmaeConfig:
    """Reduced CMAE for desk-scale training runs on one CPU core."""
    base = dict(max_len=256, embedding_dim=16, d_model=32, heads=2, cab_filters=(32, 32),
                mkb_filters=32, attn_ffn_hidden=64, mkb_ffn_hidden=64)
    base.update(overrides)
    return CmaeConfig(**base)


# --------------------------------------------------------------------------
# parameter layout


def parameter_layout(config: CmaeConfig):
    """``(name, shape, trainable)`` for every parameter, in model order."""
    c = config
    emb_trainable = not c.embeddings_frozen
    out = [(f"emb{i}.weight", (c.vocab_size, c.embedding_dim), emb_trainable) for i in (1, 2, 3)]
    c1, c2 = c.cab_filters
    for cab in ("cab1", "cab2"):
        out += [
            (f"{cab}.conv1.weight", (c.cab_kernel, c.embedding_dim, c1), True),
            (f"{cab}.conv1.bias", (c1,), True),
            (f"{cab}.conv2.weight", (c.cab_kernel, c1, c2), True),
            (f"{cab}.conv2.bias", (c2,), True),
        ]
        for p in ("q", "k", "v", "o"):
            out += [(f"{cab}.mha.w{p}", (c.d_model, c.d_model), True),
                    (f"{cab}.mha.b{p}", (c.d_model,), True)]
        out += [
            (f"{cab}.ln1.gain", (c.d_model,), True),
            (f"{cab}.ln1.offset", (c.d_model,), True),
            (f"{cab}.ffn1.weight", (c.d_model, c.attn_ffn_hidden), True),
            (f"{cab}.ffn1.bias", (c.attn_ffn_hidden,), True),
            (f"{cab}.ffn2.weight", (c.attn_ffn_hidden, c.d_model), True),
            (f"{cab}.ffn2.bias", (c.d_model,), True),
            (f"{cab}.ln2.gain", (c.d_model,), True),
            (f"{cab}.ln2.offset", (c.d_model,), True),
        ]
    for k in c.mkb_kernels:
        out += [(f"mkb.conv{k}.weight", (k, c.embedding_dim, c.mkb_filters), True),
                (f"mkb.conv{k}.bias", (c.mkb_filters,), True)]
    concat = c.mkb_filters * len(c.mkb_kernels)
    out += [
        ("mkb.ffn1.weight", (concat, c.mkb_ffn_hidden), True),
        ("mkb.ffn1.bias", (c.mkb_ffn_hidden,), True),
        ("mkb.ffn2.weight", (c.mkb_ffn_hidden, c.d_model), True),
        ("mkb.ffn2.bias", (c.d_model,), True),
        ("ensemble.gate.weight", (c.d_model, c.d_model), True),
        ("ensemble.gate.bias", (c.d_model,), True),
        ("ensemble.out.weight", (c.d_model, c.classes), True),
        ("ensemble.out.bias", (c.classes,), True),
    ]
    return out


def count_parameters_for_config(config: CmaeConfig):
    """``(trainable, frozen, total)`` without allocating any weights."""
    trainable = frozen = 0
    for _, shape, t in parameter_layout(config):
        n = int(np.prod(shape))
        if t:
            trainable += n
        else:
            frozen += n
    return trainable, frozen, trainable + frozen


def parameter_breakdown(config: CmaeConfig) -> "OrderedDict[str, int]":
    """Parameter totals per layer (names with the trailing ``.weight``/``.bias`` removed)."""
    table = OrderedDict()
    for name, shape, _ in parameter_layout(config):
        layer = name.rsplit(".", 1)[0]
        if layer.startswith("cab") and ".mha." in name:
            layer = name.split(".")[0] + ".mha"
        table[layer] = table.get(layer, 0) + int(np.prod(shape))
    return table


# --------------------------------------------------------------------------
# model


class CmaeModel:
    def __init__(self, config: CmaeConfig, params: "OrderedDict[str, nn.Parameter]"):
        self.config = config
        self.params = params

    def __getitem__(self, name) -> nn.Parameter:
        return self.params[name]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameters(self, trainable_only: bool = False):
        return [p for p in self.params.values() if p.trainable or not trainable_only]

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    def load_state(self, state) -> None:
        for k, v in state.items():
            p = self.params[k]
            if p.shape != v.shape:
                raise ConfigError(f"shape mismatch for {k}: {p.shape} vs {v.shape}")
            p.data[...] = v

    def embedding_checksum(self) -> float:
        return float(sum(np.abs(self.params[f"emb{i}.weight"].data).sum(dtype=np.float64)
                         for i in (1, 2, 3)))


def default_embeddings(config: CmaeConfig, seed: int = 0, dtype=np.float32):
    """Three independent tables for the ``xavier`` or ``normal`` sources."""
    make = {"xavier": xavier_init, "normal": random_normal_init}.get(config.embedding_source)
    if make is None:
        raise ConfigError(f"embedding source {config.embedding_source!r} needs explicit matrices")
    return [make(config.vocab_size, config.embedding_dim, seed=seed * 3 + i, dtype=dtype) for i in range(3)]


def build_model(config: CmaeConfig, embeddings: Sequence[EmbeddingMatrix] | None = None,
                seed: int = 0, dtype=np.float32) -> CmaeModel:
    """Allocate a model. Weights are Xavier-uniform, biases and layer-norm
    offsets zero, layer-norm gains one. ``embeddings`` are copied; when
    omitted they are created from ``config.embedding_source``."""
    config.validate()
    if embeddings is None:
        embeddings = default_embeddings(config, seed, dtype)
    embeddings = list(embeddings)
    if len(embeddings) != 3:
        raise ConfigError("CMAE needs three embedding matrices")
    shapes = {e.shape for e in embeddings}
    if len(shapes) != 1:
        raise ConfigError(f"embedding matrices disagree in shape: {sorted(shapes)}")
    if shapes.pop() != (config.vocab_size, config.embedding_dim):
        raise ConfigError(
            f"embeddings {embeddings[0].shape} do not match config "
            f"({config.vocab_size}, {config.embedding_dim})"
        )

    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape, trainable in parameter_layout(config):
        if name.startswith("emb"):
            data = np.array(embeddings[int(name[3]) - 1].weights, dtype=dtype)
        elif name.endswith(".gain"):
            data = np.ones(shape, dtype=dtype)
        elif len(shape) == 1:
            data = np.zeros(shape, dtype=dtype)
        elif len(shape) == 3:  # conv [k, in, out]
            k, cin, cout = shape
            data = xavier_uniform(shape, k * cin, k * cout, rng, dtype)
        else:
            data = xavier_uniform(shape, shape[0], shape[1], rng, dtype)
        params[name] = nn.Parameter(data, name, trainable=trainable, dtype=dtype)
    return CmaeModel(config, params)


def count_parameters(model: CmaeModel):
    """``(trainable, frozen, total)``."""
    trainable = sum(p.size for p in model.params.values() if p.trainable)
    frozen = sum(p.size for p in model.params.values() if not p.trainable)
    return trainable, frozen, trainable + frozen


# --------------------------------------------------------------------------
# forward


def _pad_min(ids: np.ndarray, pad_id: int) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ConfigError(f"token batch must be [batch, len], got shape {ids.shape}")
    if ids.shape[1] < MIN_SEQ_LEN:
        pad = np.full((ids.shape[0], MIN_SEQ_LEN - ids.shape[1]), pad_id, dtype=np.int64)
        ids = np.concatenate([ids, pad], axis=1)
    return ids


# architectural choices with no config knob, written into every checkpoint manifest
DROPOUT_PLACEMENT = "cab.attention_output,cab.ffn1_activation,mkb.ffn1_activation"
PADDING_MASK = "none"


def _drop(x, model, training, rng):
    return nn.dropout(x, model.config.dropout, training, rng)


def cab_forward(model: CmaeModel, block: str, emb: str, ids, training=False, rng=None):
    """Embed -> (Conv1D + GELU -> MaxPool) x2 -> attention encoder -> GlobalMaxPool.
    Returns ``[batch, d_model]``."""
    P, cfg = model.params, model.config
    x = nn.embedding(P[emb], ids)
    x = nn.maxpool1d(nn.gelu(nn.conv1d(x, P[f"{block}.conv1.weight"], P[f"{block}.conv1.bias"])))
    x = nn.maxpool1d(nn.gelu(nn.conv1d(x, P[f"{block}.conv2.weight"], P[f"{block}.conv2.bias"])))
    pe = nn.positional_encoding(x.shape[1], cfg.d_model, dtype=x.dtype)
    x = nn.add(x, nn.Tensor(pe))
    mha = {k: P[f"{block}.mha.{k}"] for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    a = _drop(nn.multi_head_attention(x, mha, cfg.heads), model, training, rng)
    x = nn.layer_norm(nn.add(x, a), P[f"{block}.ln1.gain"], P[f"{block}.ln1.offset"])
    f = _drop(nn.gelu(nn.dense(x, P[f"{block}.ffn1.weight"], P[f"{block}.ffn1.bias"])), model, training, rng)
    f = nn.dense(f, P[f"{block}.ffn2.weight"], P[f"{block}.ffn2.bias"])
    x = nn.layer_norm(nn.add(x, f), P[f"{block}.ln2.gain"], P[f"{block}.ln2.offset"])
    return nn.global_maxpool1d(x)


def mkb_forward(model: CmaeModel, emb: str, ids, training=False, rng=None):
    """Parallel Conv1D + GELU + GlobalMaxPool per kernel size, concatenated,
    then two feed-forward layers. Returns ``[batch, d_model]``."""
    P, cfg = model.params, model.config
    x = nn.embedding(P[emb], ids)
    pooled = [
        nn.global_maxpool1d(nn.gelu(nn.conv1d(x, P[f"mkb.conv{k}.weight"], P[f"mkb.conv{k}.bias"])))
        for k in cfg.mkb_kernels
    ]
    h = nn.concat(pooled, axis=-1)
    h = _drop(nn.gelu(nn.dense(h, P["mkb.ffn1.weight"], P["mkb.ffn1.bias"])), model, training, rng)
    return nn.dense(h, P["mkb.ffn2.weight"], P["mkb.ffn2.bias"])


def ensemble_logits(model: CmaeModel, outputs):
    P = model.params
    a = nn.average(outputs)
    gate = nn.sigmoid(nn.dense(a, P["ensemble.gate.weight"], P["ensemble.gate.bias"]))
    return nn.dense(nn.mul(a, gate), P["ensemble.out.weight"], P["ensemble.out.bias"])


def ensemble_forward(model: CmaeModel, cab1_out, cab2_out, mkb_out):
    """Average the block outputs, scale by a sigmoid gate, classify with softmax."""
    return nn.softmax(ensemble_logits(model, [cab1_out, cab2_out, mkb_out]))


def forward_logits(model: CmaeModel, ids, training: bool = False, rng=None):
    ids = _pad_min(ids, model.config.pad_id)
    outs = [
        cab_forward(model, "cab1", "emb1.weight", ids, training, rng),
        cab_forward(model, "cab2", "emb2.weight", ids, training, rng),
        mkb_forward(model, "emb3.weight", ids, training, rng),
    ]
    return ensemble_logits(model, outs)


def forward(model: CmaeModel, ids, training: bool = False, rng=None):
    """Class probabilities ``[batch, 7]`` for a ``[batch, len]`` token batch;
    the same batch feeds all three blocks."""
    return nn.softmax(forward_logits(model, ids, training, rng))


def predict_proba(model: CmaeModel, ids, batch_size: int = 256) -> np.ndarray:
    out = []
    with nn.no_grad():
        for s in range(0, len(ids), batch_size):
            out.append(forward(model, ids[s:s + batch_size]).data)
    if not out:
        return np.zeros((0, model.config.classes), dtype=np.float32)
    return np.concatenate(out, axis=0)
