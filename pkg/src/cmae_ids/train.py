"""Optimization loop: AdaBelief updates, plateau scheduling, early stopping and
checkpoint files."""

from __future__ import annotations

import csv
import io
import math
import struct
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .data import DatasetSplit
from .errors import CorruptCheckpoint, IncompatibleCheckpoint, NumericalError
from .embed import EmbeddingMatrix
from .model import DROPOUT_PLACEMENT, PADDING_MASK, CmaeConfig, CmaeModel, build_model, forward, predict_proba
from .tokenize import TokenMap, Tokenizer, load_subword_vocab

CHECKPOINT_VERSION = 1
_CKPT_MAGIC = b"CMAECKPT"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 5e-4
    eps: float = 1e-16
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    lr_factor: float = 0.3
    lr_patience: int = 2
    min_lr: float = 1e-5
    early_stop_patience: int = 5
    monitor: str = "val_loss"  # or "val_macro_acc"
    restore_best: bool = True
    inference_batch: int = 256
    target_accuracy: float | None = None  # stop once val macro accuracy reaches it
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        if self.lr_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 8 <= self.inference_batch <= 2048:
            raise ValueError("inference_batch must lie in [8, 2048]")
        if self.monitor not in ("val_loss", "val_macro_acc"):
            raise ValueError("monitor must be val_loss or val_macro_acc")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------------
# AdaBelief


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    s: dict = field(default_factory=dict)
    t: int = 0


def init_optimizer(params: Sequence[nn.Parameter]) -> OptimizerState:
    st = OptimizerState()
    for p in params:
        if p.trainable:
            st.m[p.name] = np.zeros_like(p.data, dtype=np.float64 if p.data.dtype == np.float64 else np.float32)
            st.s[p.name] = np.zeros_like(st.m[p.name])
    return st


def adabelief_step(params: Sequence[nn.Parameter], state: OptimizerState, config: TrainConfig,
                   lr: float | None = None, grads: dict | None = None) -> None:
    """One AdaBelief update with decoupled weight decay.

    Gradients come from ``grads`` (name -> array) or each parameter's ``.grad``.
    All gradients are checked before anything is written, so a non-finite
    gradient leaves parameters and state exactly as they were.
    """
    lr = config.lr if lr is None else lr
    live = []
    for p in params:
        if not p.trainable:
            continue
        g = grads[p.name] if grads is not None else p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {p.name} at step {state.t + 1}")
        live.append((p, g))

    b1, b2, eps = config.beta1, config.beta2, config.eps
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in live:
        m = state.m.setdefault(p.name, np.zeros_like(p.data))
        s = state.s.setdefault(p.name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        d = g - m
        s *= b2
        s += (1.0 - b2) * d * d
        s += eps
        step = (m / c1) / (np.sqrt(s / c2) + eps)
        if config.weight_decay:
            step = step + config.weight_decay * p.data
        p.data -= (lr * step).astype(p.data.dtype, copy=False)


# --------------------------------------------------------------------------
# schedule and stopping


@dataclass
class ReduceLROnPlateau:
    lr: float
    factor: float = 0.3
    patience: int = 2
    min_lr: float = 1e-5
    mode: str = "min"
    best: float = math.inf
    stalls: int = 0

    def __post_init__(self):
        if self.mode == "max" and self.best == math.inf:
            self.best = -math.inf

    def _better(self, value: float) -> bool:
        return value < self.best if self.mode == "min" else value > self.best

    def step(self, value: float) -> float:
        if self._better(value):
            self.best, self.stalls = value, 0
        else:
            self.stalls += 1
            if self.stalls >= self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.stalls = 0
        return self.lr


@dataclass
class EarlyStopping:
    patience: int = 5
    mode: str = "min"
    best: float = math.inf
    best_epoch: int = 0
    stalls: int = 0
    epoch: int = 0

    def __post_init__(self):
        if self.mode == "max" and self.best == math.inf:
            self.best = -math.inf

    def step(self, value: float) -> bool:
        """Feed one epoch's monitored value; True means stop now."""
        self.epoch += 1
        better = value < self.best if self.mode == "min" else value > self.best
        if better:
            self.best, self.best_epoch, self.stalls = value, self.epoch, 0
        else:
            self.stalls += 1
        return self.stalls >= self.patience


def lr_trace(losses: Sequence[float], lr: float = 5e-4, factor: float = 0.3,
             patience: int = 2, min_lr: float = 1e-5) -> list:
    sched = ReduceLROnPlateau(lr, factor, patience, min_lr)
    return [sched.step(v) for v in losses]


def stop_epoch(losses: Sequence[float], patience: int = 5) -> int | None:
    es = EarlyStopping(patience)
    for i, v in enumerate(losses, 1):
        if es.step(v):
            return i
    return None


# --------------------------------------------------------------------------
# training loop


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_macro_acc: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self):
        return len(self.train_loss)

    def epochs_to(self, accuracy: float) -> int | None:
        for i, a in enumerate(self.val_macro_acc, 1):
            if a >= accuracy:
                return i
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_macro_acc", "lr", "seconds"])
        for i in range(len(self)):
            w.writerow([i + 1, repr(self.train_loss[i]), repr(self.val_loss[i]),
                        repr(self.val_macro_acc[i]), repr(self.lr[i]), f"{self.seconds[i]:.3f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


def _labels(records) -> np.ndarray:
    return np.array([int(r.label) for r in records], dtype=np.int64)


def encode_records(records, tokenizer: Tokenizer, max_len) -> np.ndarray:
    return tokenizer.encode_batch([r.payload for r in records], max_len=max_len, min_len=4)


def evaluate_loss(model: CmaeModel, ids: np.ndarray, labels: np.ndarray, batch_size: int = 256):
    """Mean cross-entropy and the class probabilities, inference mode."""
    probs = predict_proba(model, ids, batch_size)
    p = np.clip(probs[np.arange(len(labels)), labels].astype(np.float64), 1e-12, 1.0)
    return float(-np.log(p).mean()) if len(labels) else 0.0, probs


def train_loop(model: CmaeModel, split: DatasetSplit, config: TrainConfig = TrainConfig(),
               tokenizer: Tokenizer | None = None, max_len=None, log_path=None,
               progress=None) -> TrainHistory:
    """Train in place; with ``restore_best`` the best-validation weights are
    loaded back before returning.

    ``max_len`` defaults to the model's configured length. Each epoch is a
    seeded shuffle of the training records cut into batches (the last partial
    batch is kept). The scheduler and the early stopper see the monitored
    validation value once per epoch.
    """
    from .evaluate import confusion, macro_metrics
    from .tokenize import hex2int_map

    if not split.train or not split.validation:
        raise ValueError("train and validation splits must be non-empty")
    tokenizer = tokenizer or Tokenizer(hex2int_map())
    max_len = model.config.max_len if max_len is None else max_len
    x_train, y_train = encode_records(split.train, tokenizer, max_len), _labels(split.train)
    x_val, y_val = encode_records(split.validation, tokenizer, max_len), _labels(split.validation)
    if x_train.max(initial=0) >= model.config.vocab_size:
        raise ValueError(f"token ids exceed vocab_size {model.config.vocab_size}")

    rng = np.random.default_rng(config.seed)
    drop_rng = np.random.default_rng(config.seed + 1)
    params = model.parameters(trainable_only=True)
    opt = init_optimizer(params)
    mode = "min" if config.monitor == "val_loss" else "max"
    sched = ReduceLROnPlateau(config.lr, config.lr_factor, config.lr_patience, config.min_lr, mode)
    stopper = EarlyStopping(config.early_stop_patience, mode)
    hist = TrainHistory()
    best_state = model.state()
    lr = config.lr

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(x_train))
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start:start + config.batch_size]
            model.zero_grad()
            probs = forward(model, x_train[idx], training=True, rng=drop_rng)
            loss = nn.cross_entropy(probs, y_train[idx])
            loss.backward()
            try:
                adabelief_step(params, opt, config, lr)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch} batch {b}: {exc}") from None
            total += loss.item() * len(idx)
            seen += len(idx)
        model.zero_grad()

        val_loss, probs = evaluate_loss(model, x_val, y_val, config.inference_batch)
        acc = macro_metrics(confusion(probs.argmax(axis=1), y_val)).accuracy
        hist.train_loss.append(total / seen)
        hist.val_loss.append(val_loss)
        hist.val_macro_acc.append(acc)
        hist.lr.append(lr)
        hist.seconds.append(time.perf_counter() - t0)
        if progress is not None:
            progress(epoch, hist)

        monitored = val_loss if config.monitor == "val_loss" else acc
        stop = stopper.step(monitored)
        if stopper.best_epoch == epoch:
            best_state = model.state()
            hist.best_epoch = epoch
        lr = sched.step(monitored)
        if stop:
            hist.stopped_early = True
            break
        if config.target_accuracy is not None and acc >= config.target_accuracy:
            break

    if config.restore_best:
        model.load_state(best_state)
    if log_path is not None:
        hist.write_csv(log_path)
    return hist


# --------------------------------------------------------------------------
# checkpoints
#
# Layout: magic, u32 manifest length, UTF-8 manifest, then each parameter as
# little-endian f32 in manifest order. Manifest lines are ``key = value``.


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_checkpoint(model: CmaeModel, path, extra: dict | None = None) -> None:
    """``extra`` carries run metadata (train config, tokenizer) into the manifest."""
    lines = [f"format_version = {CHECKPOINT_VERSION}"]
    for k, v in model.config.to_dict().items():
        lines.append(f"config.{k} = {_fmt(v)}")
    lines.append(f"arch.dropout_placement = {DROPOUT_PLACEMENT}")
    lines.append(f"arch.padding_mask = {PADDING_MASK}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {_fmt(v)}")
    for name, p in model.params.items():
        shape = "x".join(str(d) for d in p.shape)
        lines.append(f"param.{name} = {shape} {'trainable' if p.trainable else 'frozen'}")
    manifest = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<I", len(manifest)) + manifest)
        for p in model.params.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_manifest(path) -> "OrderedDict[str, str]":
    with open(path, "rb") as fh:
        head = fh.read(len(_CKPT_MAGIC) + 4)
        if len(head) < len(_CKPT_MAGIC) + 4 or head[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
            raise CorruptCheckpoint(f"{path}: not a checkpoint file")
        (n,) = struct.unpack("<I", head[len(_CKPT_MAGIC):])
        raw = fh.read(n)
    if len(raw) < n:
        raise CorruptCheckpoint(f"{path}: manifest truncated")
    out = OrderedDict()
    for line in raw.decode("utf-8").splitlines():
        if line.strip():
            k, _, v = line.partition(" = ")
            out[k] = v
    return out


def _parse_config(manifest) -> CmaeConfig:
    raw = {k[len("config."):]: v for k, v in manifest.items() if k.startswith("config.")}
    defaults = CmaeConfig().to_dict()
    values = {}
    for k, v in raw.items():
        if k not in defaults:
            raise IncompatibleCheckpoint(f"unknown config field {k}")
        d = defaults[k]
        if isinstance(d, bool):
            values[k] = v == "True"
        elif isinstance(d, int):
            values[k] = int(v)
        elif isinstance(d, float):
            values[k] = float(v)
        elif isinstance(d, (tuple, list)):
            values[k] = tuple(int(x) for x in v.split(",")) if v else ()
        else:
            values[k] = v
    return CmaeConfig.from_dict(values)


def load_checkpoint(path, expect: CmaeConfig | None = None) -> CmaeModel:
    """Rebuild the model bit-for-bit. ``expect`` guards against loading a
    checkpoint trained under another architecture."""
    manifest = read_manifest(path)
    version = manifest.get("format_version")
    if version != str(CHECKPOINT_VERSION):
        raise IncompatibleCheckpoint(f"checkpoint version {version}, reader supports {CHECKPOINT_VERSION}")
    config = _parse_config(manifest)
    if expect is not None and expect.to_dict() != config.to_dict():
        diff = sorted(k for k, v in expect.to_dict().items() if config.to_dict()[k] != v)
        raise IncompatibleCheckpoint(f"config mismatch in {', '.join(diff)}")
    blank = EmbeddingMatrix(np.zeros((config.vocab_size, config.embedding_dim), np.float32))
    model = build_model(config, [blank] * 3, seed=0)
    entries = [(k[len("param."):], v) for k, v in manifest.items() if k.startswith("param.")]
    if [n for n, _ in entries] != list(model.params):
        raise IncompatibleCheckpoint("parameter names differ from the configured architecture")

    offset = len(_CKPT_MAGIC) + 4 + len(_manifest_bytes(path))
    blob = Path(path).read_bytes()[offset:]
    pos = 0
    for name, desc in entries:
        shape_s, _, flag = desc.partition(" ")
        shape = tuple(int(x) for x in shape_s.split("x"))
        p = model.params[name]
        if shape != p.shape:
            raise CorruptCheckpoint(f"{name}: manifest shape {shape}, architecture {p.shape}")
        nbytes = int(np.prod(shape)) * 4
        if pos + nbytes > len(blob):
            raise CorruptCheckpoint(f"{name}: data truncated")
        p.data[...] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape)
        p.trainable = flag == "trainable"
        pos += nbytes
    if pos != len(blob):
        raise CorruptCheckpoint(f"{len(blob) - pos} trailing bytes after the last parameter")
    return model


def tokenizer_manifest(tokenizer: Tokenizer, vocab_path: str = "") -> dict:
    """Manifest entries that rebuild the model-facing tokenizer. Subword
    vocabularies are referenced by path rather than embedded."""
    if tokenizer.token_map is not None:
        tm = tokenizer.token_map
        return {"tokenizer.kind": "bytes", "tokenizer.name": tokenizer.name,
                "tokenizer.pad_id": tm.pad_id, "tokenizer.provenance": tm.provenance,
                "tokenizer.table": [int(t) for t in tm.table]}
    sw = tokenizer.subword
    return {"tokenizer.kind": "subword", "tokenizer.name": tokenizer.name,
            "tokenizer.pad_id": sw.pad_id, "tokenizer.vocab": str(vocab_path),
            "tokenizer.hex_text": tokenizer.hex_text}


def tokenizer_from_manifest(manifest) -> Tokenizer:
    from .tokenize import hex2int_map

    kind = manifest.get("tokenizer.kind")
    if kind is None:
        return Tokenizer(hex2int_map())
    name = manifest.get("tokenizer.name")
    if kind == "bytes":
        table = np.array([int(x) for x in manifest["tokenizer.table"].split(",")])
        tm = TokenMap(table, int(manifest["tokenizer.pad_id"]), manifest.get("tokenizer.provenance", "hex2int"))
        return Tokenizer(tm, name=name)
    if kind == "subword":
        path = manifest.get("tokenizer.vocab", "")
        if not path or not Path(path).exists():
            raise IncompatibleCheckpoint(f"subword vocabulary {path!r} referenced by the checkpoint is missing")
        sw = load_subword_vocab(path, pad_id=int(manifest["tokenizer.pad_id"]))
        return Tokenizer(subword=sw, hex_text=manifest.get("tokenizer.hex_text", "True") == "True", name=name)
    raise IncompatibleCheckpoint(f"unknown tokenizer kind {kind!r}")


def _manifest_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        fh.seek(len(_CKPT_MAGIC))
        (n,) = struct.unpack("<I", fh.read(4))
        return fh.read(n)
