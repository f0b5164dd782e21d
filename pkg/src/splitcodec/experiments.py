"""Experiment drivers behind the command-line interface."""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .analysis import ComplexityReport, ComplexityRow, arnoldi_cov_logdet, bd_rate, lipschitz_power, rademacher_estimate
from .checkpoint import Checkpoint
from .codec import CodecModel, SequenceCodec
from .config import ExperimentConfig
from .data import Corpus, encode_text
from .entropy_models import gaussian_bits
from .quantization import quantize_ste
from .train import TrainResult, train

OUTPUT_ENV = "SPLITCODEC_OUTPUT_DIR"
LOG_COLUMNS = ("step", "lr", "loss", "distortion", "bpt_y", "bpt_w")
RD_COLUMNS = ("model", "split", "lambda", "hyper_prior_bpt", "total_bpt", "estimated_bpt", "distortion", "perplexity")


def output_dir(default: str | Path | None = None) -> Path:
    """Output directory; the environment variable wins over the command-line default."""
    env = os.environ.get(OUTPUT_ENV)
    return Path(env if env else (default if default is not None else "runs"))


def checkpoint_name(variant: str, split: int, lmbda: float) -> str:
    return f"{variant}_s{split}_l{lmbda:g}.safetensors"


def load_corpus(config: ExperimentConfig) -> Corpus:
    t = config.train
    return Corpus.load(t.corpus, t.corpus_chars, seed=t.seed)


def run_train(config: ExperimentConfig, out_dir: str | Path, corpus: Corpus | None = None,
              on_log=None) -> tuple[Path, TrainResult]:
    """Train one codec, then write its checkpoint and a CSV training log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    corpus = corpus if corpus is not None else load_corpus(config)
    result = train(config, corpus, on_log)
    name = checkpoint_name(config.codec.variant, config.model.split, config.train.lmbda)
    extra = {"best_val": result.best_val, "seconds": round(result.seconds, 3), "restarts": result.restarts, "stopped_early": result.stopped_early,
             "evals": result.evals}
    path = Checkpoint.from_model(result.model, result.step, extra).save(out / name)
    with (out / (name.removesuffix(".safetensors") + ".log.csv")).open("w", newline="") as f:
        writer = csv.DictWriter(f, LOG_COLUMNS, extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        writer.writerows(result.log)
    return path, result


# ---------------------------------------------------------------- evaluation


@dataclass
class RatePoint:
    model: str
    split: int
    lmbda: float
    hyper_prior_bpt: float
    total_bpt: float
    estimated_bpt: float
    distortion: float

    @property
    def perplexity(self) -> float:
        return math.exp(self.distortion)

    def as_record(self) -> dict:
        return {"model": self.model, "split": self.split, "lambda": self.lmbda,
                "hyper_prior_bpt": self.hyper_prior_bpt, "total_bpt": self.total_bpt,
                "estimated_bpt": self.estimated_bpt, "distortion": self.distortion,
                "perplexity": self.perplexity}


def validation_windows(corpus: Corpus, count: int, seq_len: int, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(seed)
    return corpus.sample("val", count, seq_len, gen)


def measure_rate_point(model: CodecModel, corpus: Corpus, n_sequences: int, seed: int = 1234) -> RatePoint:
    """Coded BPT (whole-sequence packets), model-estimated BPT and decoded-prediction cross-entropy."""
    cfg = model.config
    codec = SequenceCodec(model)
    inputs, targets = validation_windows(corpus, n_sequences, cfg.model.seq_len, seed)
    bits = hyper_bits = est = ce = 0.0
    tokens = 0
    for x, y in zip(inputs, targets):
        packet = codec.encode_whole(x)
        decoded = codec.decode_whole(packet)
        bits += packet.payload_bits
        hyper_bits += 8 * len(packet.w_chunk)
        by, bw = codec.estimate_bpt(x)
        est += (by + bw) * x.numel()
        ce += float(F.cross_entropy(decoded.logits, y, reduction="sum"))
        tokens += x.numel()
    return RatePoint(cfg.codec.variant, cfg.model.split, cfg.train.lmbda, hyper_bits / tokens, bits / tokens,
                     est / tokens, ce / tokens)


def rd_sweep(config: ExperimentConfig, ckpt_dir: str | Path, out_dir: str | Path, variants: list[str] | None = None,
             n_sequences: int = 20) -> dict:
    """Rate-distortion table over every (variant, split, lambda) checkpoint, plus BD-rates."""
    if len(config.lambdas) < 2:
        raise ValueError("an RD sweep needs at least two lambda values")
    variants = variants or [config.codec.variant]
    ckpt_dir = Path(ckpt_dir)
    wanted = [(v, s, lam) for v in variants for s in config.splits for lam in config.lambdas]
    missing = [checkpoint_name(*k) for k in wanted if not (ckpt_dir / checkpoint_name(*k)).exists()]
    if missing:
        raise FileNotFoundError("missing checkpoints: " + ", ".join(missing))
    corpus = load_corpus(config)
    points = []
    for v, s, lam in wanted:
        model = Checkpoint.load(ckpt_dir / checkpoint_name(v, s, lam)).build_model()
        points.append(measure_rate_point(model, corpus, n_sequences))
    bd = {}
    if len(variants) > 1:
        for s in config.splits:
            ref = [(p.total_bpt, -p.distortion) for p in points if p.model == variants[0] and p.split == s]
            for other in variants[1:]:
                test = [(p.total_bpt, -p.distortion) for p in points if p.model == other and p.split == s]
                key = f"{other}_vs_{variants[0]}@split{s}"
                try:
                    bd[key] = bd_rate(ref, test)
                except ValueError as exc:
                    bd[key] = f"unavailable: {exc}"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [p.as_record() for p in points]
    with (out / "rd_sweep.csv").open("w", newline="") as f:
        writer = csv.DictWriter(f, RD_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
    doc = {"schema": "rd-sweep/1", "columns": list(RD_COLUMNS), "rows": records, "bd_rate_percent": bd,
           "quality": "negative cross-entropy in nats (log of inverse perplexity)"}
    (out / "rd_sweep.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


# ---------------------------------------------------------------- complexity analysis


def rate_function(model: CodecModel):
    """``y -> log g[h(y)](y)`` in nats for a single (T, E) latent."""

    def fn(y: torch.Tensor) -> torch.Tensor:
        yb = y.unsqueeze(0)
        w = quantize_ste(model.analysis(yb), check_finite=False)
        params = model.entropy_params(w, yb)
        return -math.log(2.0) * gaussian_bits(yb, params).sum()

    return fn


@torch.no_grad()
def latent_samples(model: CodecModel, inputs: torch.Tensor, batch: int = 16) -> torch.Tensor:
    ys = [model.latent(inputs[i:i + batch]) for i in range(0, inputs.shape[0], batch)]
    return torch.cat(ys)


def analyze_checkpoint(ckpt: Checkpoint, corpus: Corpus, rate_sequences: int = 20) -> ComplexityRow:
    cfg = ckpt.config
    a = cfg.analysis
    model = ckpt.build_model()
    inputs, _ = validation_windows(corpus, a.samples, cfg.model.seq_len, a.seed)
    y = latent_samples(model, inputs)
    d = y.shape[1] * y.shape[2]
    rad = rademacher_estimate(y.double().numpy(), a.rademacher_draws, seed=a.seed)
    cov = arnoldi_cov_logdet(y.double().numpy().reshape(y.shape[0], -1), min(d, a.arnoldi_iterations), seed=a.seed)
    lip_fn = rate_function(model)
    lip = lipschitz_power(lip_fn, list(y[: a.lipschitz_samples]), a.lipschitz_iterations, seed=a.seed)
    point = measure_rate_point(model, corpus, rate_sequences, seed=a.seed + 1)
    return ComplexityRow(cfg.codec.variant, cfg.model.split, cfg.train.lmbda, point.total_bpt, point.distortion,
                         rad, cov.value, math.log(max(lip, 1e-300)))


def analyze(checkpoints: list[str | Path], out_dir: str | Path, samples: int | None = None,
            rate_sequences: int = 20) -> ComplexityReport:
    ckpts = [Checkpoint.load(p) for p in checkpoints]
    if not ckpts:
        raise ValueError("no checkpoints given")
    rows = []
    for ck in ckpts:
        if samples is not None:
            ck = Checkpoint(ck.config.replace(analysis={"samples": samples}), ck.state, ck.step, ck.extra)
        rows.append(analyze_checkpoint(ck, load_corpus(ck.config), rate_sequences))
    rows.sort(key=lambda r: (r.model, r.split, r.lmbda))
    a = ckpts[0].config.analysis
    settings = {"samples": samples if samples is not None else a.samples, "rademacher_draws": a.rademacher_draws,
                "arnoldi_iterations": a.arnoldi_iterations, "lipschitz_samples": a.lipschitz_samples,
                "lipschitz_iterations": a.lipschitz_iterations, "seed": a.seed, "rate_sequences": rate_sequences,
                "covariance": "centred, normalised by N-1", "eps_eig": 1e-12}
    report = ComplexityReport.build(rows, settings)
    report.write(out_dir)
    return report


def tokens_from_text(text: str, seq_len: int) -> np.ndarray:
    tokens = encode_text(text)
    if tokens.size > seq_len:
        raise ValueError(f"input has {tokens.size} characters; the context holds {seq_len}")
    return tokens


# ---------------------------------------------------------------- desk-scale setup

DESK_LAMBDAS = (0.001, 0.01)
DESK_SPLITS = (2, 3, 4)


def desk_config(split: int = 3, lmbda: float = 0.001, variant: str = "proposed", max_steps: int = 1500) -> ExperimentConfig:
    """Small LM (L=6, E=64, T=128, C=4) used by the acceptance runs."""
    return ExperimentConfig().replace(
        model={"n_layer": 6, "n_embd": 64, "n_head": 4, "seq_len": 128, "split": split},
        codec={"variant": variant, "channels": 4},
        train={"lmbda": lmbda, "max_steps": max_steps, "warmup_steps": 100},
        splits=list(DESK_SPLITS), lambdas=list(DESK_LAMBDAS))


def ensure_checkpoint(config: ExperimentConfig, ckpt_dir: str | Path, corpus: Corpus | None = None) -> Path:
    """Train ``config`` unless a checkpoint with the same config hash already exists."""
    path = Path(ckpt_dir) / checkpoint_name(config.codec.variant, config.model.split, config.train.lmbda)
    if path.exists():
        try:
            if Checkpoint.load(path).config_hash == config.config_hash():
                return path
        except ValueError:
            pass
    return run_train(config, ckpt_dir, corpus)[0]
