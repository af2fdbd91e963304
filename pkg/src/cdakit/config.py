"""Flat ``key = value`` pipeline configuration."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .adaptation import TrainConfig
from .clustering import ClusterConfig
from .embedding_io import SynthConfig


@dataclass
class PipelineConfig:
    # data: files, or a synthetic pair when ``source`` is empty
    source: str = ""
    target: str = ""
    target_eval: str = ""
    format: str = "binary"
    holdout: float = 0.5
    synth_classes: int = 10
    synth_per_class: int = 60
    synth_dim: int = 112
    synth_spread: float = 0.21
    synth_shift: float = 0.63
    synth_shift_noise: float = 0.0
    # clustering
    alpha: float = 0.675
    beta: float = 0.8
    min_size: int = 3
    # training
    lam: float = 0.5
    lr: float = 0.1
    iters: int = 1500
    pseudo_iters: int = 0
    batch: int = 64
    seed: int = 0
    mmd_layers: str = "last_two"
    kernels: int = 5
    momentum: float = 0.0
    hidden_dim: int = 0
    warmup_fraction: float = 0.2
    # output
    out: str = "cda_out"

    def cluster_config(self) -> ClusterConfig:
        return ClusterConfig(self.alpha, self.beta, self.min_size)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lam=self.lam, learning_rate=self.lr, max_iters=self.iters, batch_size=self.batch,
            seed=self.seed, mmd_layers=self.mmd_layers, momentum=self.momentum,
            warmup_fraction=self.warmup_fraction, pseudo_iters=self.pseudo_iters or None,
            hidden_dim=self.hidden_dim or None, n_kernels=self.kernels,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(self.synth_classes, self.synth_per_class, self.synth_dim, self.synth_spread,
                           self.synth_shift, self.synth_shift_noise, self.seed)

    def validate(self) -> None:
        self.cluster_config().validate()
        self.train_config().validate()
        if not self.source:
            self.synth_config().validate()
        else:
            for key in ("source", "target", "target_eval"):
                p = getattr(self, key)
                if p and not Path(p).exists():
                    raise FileNotFoundError(f"{key}: no such file: {p}")
            if not self.target:
                raise ValueError("target path is required when source is given")
        if not 0 <= self.holdout < 1:
            raise ValueError("holdout must be in [0, 1)")

    def update(self, values: dict) -> "PipelineConfig":
        types = {f.name: f.type for f in fields(self)}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            kind = types[key]
            try:
                val = raw if not isinstance(raw, str) else {"int": int, "float": float}.get(kind, str)(raw)
            except ValueError:
                raise ValueError(f"bad value for {key}: {raw!r}") from None
            setattr(self, key, val)
        return self

    def dumps(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"config line {lineno}: empty key")
        values[key] = val
    return values


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such config file: {path}")
    return PipelineConfig().update(parse_config_text(path.read_text()))
