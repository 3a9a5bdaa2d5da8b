"""Flat ``section.key = value`` run configuration.

Values resolve in order: built-in defaults, the config file, environment
variables named ``CMAE_<SECTION>_<KEY>``, then explicit overrides (CLI flags).
Unknown keys are errors at every layer.
"""

from __future__ import annotations

import os
from collections import OrderedDict
from dataclasses import fields
from pathlib import Path

from .errors import InvalidSpec
from .model import CmaeConfig
from .train import TrainConfig

ENV_PREFIX = "CMAE_"

# data / tokenizer keys that belong to neither dataclass
_RUN_DEFAULTS = OrderedDict([
    ("data.train", ""),
    ("data.validation", ""),
    ("data.test", ""),
    ("data.out_dir", "run"),
    ("tokenizer.kind", "hex2int"),  # hex2int | hex2tok | word2vec | subword
    ("tokenizer.map", ""),  # token map file for hex2tok / word2vec
    ("tokenizer.vocab", ""),  # vocabulary file for subword
    ("tokenizer.max_len", "1500"),  # 1500 | 3000 | max
    ("embedding.source", "xavier"),  # xavier | normal | file
    ("embedding.file", ""),
    ("embedding.frozen", "false"),
])


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return ""
    return repr(v) if isinstance(v, float) else str(v)


def default_entries() -> "OrderedDict[str, str]":
    out = OrderedDict()
    for f in fields(CmaeConfig):
        if f.name in ("embeddings_frozen", "embedding_source", "max_len"):
            continue  # driven by the embedding/tokenizer sections
        out[f"model.{f.name}"] = _render(getattr(CmaeConfig(), f.name))
    for f in fields(TrainConfig):
        out[f"train.{f.name}"] = _render(getattr(TrainConfig(), f.name))
    out.update(_RUN_DEFAULTS)
    return out


def parse_config_text(text: str, source: str = "<config>") -> "OrderedDict[str, str]":
    out = OrderedDict()
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidSpec(f"{source}:{n}: expected 'section.key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        if "." not in k:
            raise InvalidSpec(f"{source}:{n}: key {k!r} lacks a section prefix")
        out[k] = v
    return out


class RunConfig:
    def __init__(self, entries: "OrderedDict[str, str]"):
        self.entries = entries

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None, environ=None) -> "RunConfig":
        entries = default_entries()
        layers = []
        if path is not None:
            layers.append((str(path), parse_config_text(Path(path).read_text(encoding="utf-8"), str(path))))
        env = os.environ if environ is None else environ
        env_layer = OrderedDict()
        for key in entries:
            name = ENV_PREFIX + key.replace(".", "_").upper()
            if name in env:
                env_layer[key] = env[name]
        layers.append(("environment", env_layer))
        layers.append(("command line", OrderedDict((k, _render(v)) for k, v in (overrides or {}).items()
                                                   if v is not None)))
        for source, layer in layers:
            for k, v in layer.items():
                if k not in entries:
                    raise InvalidSpec(f"{source}: unknown config key {k!r}")
                entries[k] = v
        return cls(entries)

    def __getitem__(self, key: str) -> str:
        return self.entries[key]

    def get_bool(self, key: str) -> bool:
        v = self.entries[key].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise InvalidSpec(f"{key}: expected a boolean, got {v!r}")
        return v in ("true", "1", "yes")

    def max_len(self):
        v = self.entries["tokenizer.max_len"]
        return "max" if v == "max" else int(v)

    def _typed(self, cls, section: str, base) -> dict:
        out = {}
        for f in fields(cls):
            key = f"{section}.{f.name}"
            if key not in self.entries:
                continue
            raw, default = self.entries[key], getattr(base, f.name)
            try:
                if isinstance(default, bool):
                    out[f.name] = self.get_bool(key)
                elif isinstance(default, int):
                    out[f.name] = int(raw)
                elif isinstance(default, float):
                    out[f.name] = float(raw)
                elif isinstance(default, tuple):
                    out[f.name] = tuple(int(x) for x in raw.split(",") if x.strip())
                elif default is None:
                    out[f.name] = float(raw) if raw else None
                else:
                    out[f.name] = raw
            except ValueError:
                raise InvalidSpec(f"{key}: cannot parse {raw!r}") from None
        return out

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(**self._typed(TrainConfig, "train", TrainConfig()))
        except ValueError as exc:
            raise InvalidSpec(str(exc)) from None

    def model_config(self, vocab_size: int | None = None, embedding_dim: int | None = None) -> CmaeConfig:
        kw = self._typed(CmaeConfig, "model", CmaeConfig())
        ml = self.max_len()
        kw["max_len"] = 3000 if ml == "max" else ml
        kw["embeddings_frozen"] = self.get_bool("embedding.frozen")
        src = self["embedding.source"]
        kw["embedding_source"] = "external" if src == "file" else src
        if vocab_size is not None:
            kw["vocab_size"] = vocab_size
        if embedding_dim is not None:
            kw["embedding_dim"] = embedding_dim
        cfg = CmaeConfig(**kw)
        cfg.validate()
        return cfg

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.entries.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")
