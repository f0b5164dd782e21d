"""Experiment configuration.

Config files are JSON objects with four optional sections::

    {
      "model":    {"n_layer": 6, "n_embd": 64, "n_head": 4, "seq_len": 128, "split": 3},
      "codec":    {"variant": "proposed", "channels": 4},
      "train":    {"lmbda": 0.001, "max_steps": 1500, "seed": 0},
      "analysis": {"samples": 200, "rademacher_draws": 2000}
    }

Unknown keys are rejected. ``CONFIG_VERSION`` is part of the config hash.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

CONFIG_VERSION = 1
VARIANTS = ("proposed", "fourier", "direct_access")


@dataclass
class ModelConfig:
    vocab_size: int = 96
    n_layer: int = 6
    n_embd: int = 64
    n_head: int = 4
    seq_len: int = 128
    split: int = 3


@dataclass
class CodecConfig:
    variant: str = "proposed"
    channels: int = 4
    analysis_widths: list[int] | None = None
    synthesis_widths: list[int] | None = None
    density_filters: list[int] = field(default_factory=lambda: [3] * 8)
    fourier_coefficients: int = 60


@dataclass
class TrainConfig:
    lmbda: float = 0.001
    seed: int = 0
    batch_size: int = 4
    accum_steps: int = 4
    max_steps: int = 1500
    warmup_steps: int = 100
    lr_max: float = 6e-4
    lr_min: float = 6e-5
    fallback_lr_max: float = 1e-4
    betas: list[float] = field(default_factory=lambda: [0.9, 0.95])
    weight_decay: float = 0.1
    grad_clip: float = 1.0
    patience: int = 5
    eval_interval: int = 0  # 0: validate once per pass over the training split
    eval_batches: int = 8
    corpus: str | None = None
    corpus_chars: int = 1_000_000


@dataclass
class AnalysisConfig:
    samples: int = 200
    rademacher_draws: int = 2000
    arnoldi_iterations: int = 256
    lipschitz_samples: int = 16
    lipschitz_iterations: int = 20
    seed: int = 0


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    lambdas: list[float] = field(default_factory=lambda: [0.001, 0.0025, 0.0075, 0.01])
    splits: list[int] = field(default_factory=lambda: [3])

    def __post_init__(self):
        m, c = self.model, self.codec
        if c.analysis_widths is None:
            c.analysis_widths = [m.n_embd // 2, m.n_embd // 4, m.n_embd // 8, c.channels]
        if c.synthesis_widths is None:
            c.synthesis_widths = [m.n_embd // 8, m.n_embd // 4, m.n_embd // 2, 2 * m.n_embd]
        self.validate()

    def validate(self) -> None:
        m, c, t = self.model, self.codec, self.train
        if not 1 <= m.split < m.n_layer:
            raise ValueError(f"split must satisfy 1 <= S < L (S={m.split}, L={m.n_layer})")
        if c.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {c.variant!r}")
        if t.lmbda < 0 or any(x < 0 for x in self.lambdas):
            raise ValueError("lambda must be non-negative")
        widths = [m.vocab_size, m.n_layer, m.n_embd, m.n_head, m.seq_len, c.channels,
                  *c.analysis_widths, *c.synthesis_widths]
        if any(w <= 0 for w in widths):
            raise ValueError("all widths must be positive")
        if c.analysis_widths[-1] != c.channels:
            raise ValueError("analysis ladder must end at the side-information width")
        if c.synthesis_widths[-1] != 2 * m.n_embd:
            raise ValueError("synthesis ladder must end at 2 * n_embd")
        if m.n_embd % m.n_head:
            raise ValueError("n_embd must be divisible by n_head")
        if any(s >= m.n_layer or s < 1 for s in self.splits):
            raise ValueError("every split in the sweep must satisfy 1 <= S < L")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        sections = {"model": ModelConfig, "codec": CodecConfig, "train": TrainConfig, "analysis": AnalysisConfig}
        known = set(sections) | {"lambdas", "splits"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs: dict[str, Any] = {}
        for name, klass in sections.items():
            sub = dict(d.get(name) or {})
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(sub) - names
            if bad:
                raise ValueError(f"unknown keys in [{name}]: {sorted(bad)}")
            kwargs[name] = klass(**sub)
        for key in ("lambdas", "splits"):
            if key in d:
                kwargs[key] = list(d[key])
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with section fields overridden, e.g. ``replace(model={"split": 2})``."""
        d = self.to_dict()
        # ladders still at their derived defaults follow the new dimensions
        m, c = self.model, self.codec
        if c.analysis_widths == [m.n_embd // 2, m.n_embd // 4, m.n_embd // 8, c.channels]:
            d["codec"]["analysis_widths"] = None
        if c.synthesis_widths == [m.n_embd // 8, m.n_embd // 4, m.n_embd // 2, 2 * m.n_embd]:
            d["codec"]["synthesis_widths"] = None
        for name, values in sections.items():
            if isinstance(values, dict):
                d[name].update(values)
            else:
                d[name] = values
        return ExperimentConfig.from_dict(d)

    def architecture_dict(self) -> dict[str, Any]:
        """Fields that determine the network and its coding behaviour."""
        return {"version": CONFIG_VERSION, "model": dataclasses.asdict(self.model),
                "codec": dataclasses.asdict(self.codec)}

    def config_hash(self) -> str:
        """SHA-256 over the full config (training settings included) and the format version."""
        payload = {"version": CONFIG_VERSION, **self.to_dict()}
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()
