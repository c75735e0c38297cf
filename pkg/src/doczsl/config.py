"""Flat ``key=value`` run configuration: file first, then command-line overrides."""
from __future__ import annotations

import os
from dataclasses import dataclass, fields

from .errors import ConfigError
from .synth import SynthConfig
from .train import TrainConfig

_DATA_FILES = {
    "documents": "documents.jsonl",
    "features": "features.jsonl",
    "split": "split.jsonl",
    "wordvecs": "wordvecs.txt",
}


@dataclass
class RunConfig:
    # shared
    seed: int = 0
    # synthetic data
    n_seen: int = 20
    n_unseen: int = 5
    train_per_class: int = 20
    heldout_per_class: int = 5
    test_per_class: int = 10
    n_patches: int = 16
    r0: int = 32
    visual_vocab: int = 40
    noise_vocab: int = 200
    words_per_doc: int = 50
    discriminative_words: int = 5
    sigma: float = 0.1
    # training / model
    epochs: int = 100
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lambda_local: float = 1.0
    pool: str = "mean"
    r: int = 64
    blocks: int = 2
    heads: int = 4
    pos_emb: bool = False
    max_words: int = 512
    patience: int = 10
    proxy_classes: int = 4
    oov_policy: str = "drop"
    # evaluation
    gamma: str = "0"
    calibration: str = "proxy"
    gamma_steps: int = 41
    # paths
    data_dir: str = ""
    documents: str = ""
    features: str = ""
    split: str = ""
    wordvecs: str = ""
    checkpoint: str = ""
    out: str = ""

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    @classmethod
    def from_sources(cls, path=None, overrides=None):
        values = {}
        if path:
            values.update(read_config_file(path))
        values.update(overrides or {})
        cfg = cls()
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, _coerce(key, raw, getattr(cls, key)))
        return cfg

    def synth_config(self):
        names = {f.name for f in fields(SynthConfig)}
        return SynthConfig(**{k: getattr(self, k) for k in names})

    def train_config(self):
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def data_path(self, kind):
        explicit = getattr(self, kind)
        if explicit:
            return explicit
        if not self.data_dir:
            raise ConfigError(f"no path for {kind!r}: set {kind} or data_dir")
        return os.path.join(self.data_dir, _DATA_FILES[kind])

    def gamma_value(self):
        if self.gamma == "auto":
            return None
        try:
            return float(self.gamma)
        except ValueError:
            raise ConfigError(f"gamma must be a number or 'auto', got {self.gamma!r}") from None

    def dumps(self):
        return "".join(f"{k}={_fmt(getattr(self, k))}\n" for k in self.keys())

    def write(self, out_dir, name="config.txt"):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        return path


def read_config_file(path):
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key.replace("-", "_")] = value
    return values


def _coerce(key, raw, default):
    if not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)
