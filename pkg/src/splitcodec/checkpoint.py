"""Checkpoints as safetensors files with one JSON metadata entry.

The metadata entry ``splitcodec`` holds the config, its hash, the variant
and the training step. Serialization is deterministic, so loading and saving
a checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .codec import CodecModel
from .config import ExperimentConfig

META_KEY = "splitcodec"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: ExperimentConfig
    state: dict[str, torch.Tensor]
    step: int = 0
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: CodecModel, step: int = 0, extra: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().cpu().clone().contiguous() for k, v in model.state_dict().items()}
        return cls(model.config, state, step, dict(extra or {}))

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def metadata(self) -> str:
        meta = {"version": CHECKPOINT_VERSION, "config": self.config.to_dict(),
                "config_hash": self.config_hash, "variant": self.config.codec.variant,
                "step": self.step, "extra": self.extra}
        return json.dumps(meta, sort_keys=True, separators=(",", ":"))

    def to_bytes(self) -> bytes:
        return st_save(dict(sorted(self.state.items())), metadata={META_KEY: self.metadata()})

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)
        return path

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header_len = int.from_bytes(data[:8], "little")
        try:
            header = json.loads(data[8:8 + header_len])
            meta = json.loads(header["__metadata__"][META_KEY])
        except (ValueError, KeyError) as exc:
            raise CheckpointError("not a splitcodec checkpoint") from exc
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
        config = ExperimentConfig.from_dict(meta["config"])
        if config.config_hash() != meta["config_hash"]:
            raise CheckpointError("config hash does not match the stored config")
        return cls(config, st_load(data), int(meta["step"]), meta.get("extra", {}))

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise CheckpointError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def build_model(self) -> CodecModel:
        model = CodecModel(self.config)
        missing, unexpected = model.load_state_dict(self.state, strict=False)
        if missing or unexpected:
            raise CheckpointError(f"checkpoint does not match the architecture "
                                  f"(missing {missing}, unexpected {unexpected})")
        return model.eval()
