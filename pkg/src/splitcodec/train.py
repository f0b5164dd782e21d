"""Rate-distortion training loop with gradient accumulation, early stopping and divergence fallback."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import dataclass, field

import torch

from .codec import CodecModel, rd_loss
from .config import ExperimentConfig
from .data import Corpus
from .numerics import AdamW, clip_grad_norm, lr_schedule

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainResult:
    model: CodecModel
    step: int
    best_val: float
    log: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    restarts: int = 0
    stopped_early: bool = False
    seconds: float = 0.0


def decay_mask(model: CodecModel) -> list[bool]:
    """Decay transformer matrices only; density parameters and norms are left alone."""
    return [p.dim() >= 2 and not name.startswith("hyper.") for name, p in model.named_parameters()]


@torch.no_grad()
def evaluate(model: CodecModel, batches, lmbda: float) -> dict:
    was_training = model.training
    model.eval()
    tot = {"loss": 0.0, "distortion": 0.0, "bpt_y": 0.0, "bpt_w": 0.0}
    for batch in batches:
        terms = rd_loss(batch, model, lmbda)
        tot["loss"] += float(terms.loss)
        tot["distortion"] += float(terms.distortion)
        tot["bpt_y"] += float(terms.rate_y)
        tot["bpt_w"] += float(terms.rate_w)
    model.train(was_training)
    return {k: v / len(batches) for k, v in tot.items()}


def steps_per_epoch(config: ExperimentConfig, corpus: Corpus) -> int:
    t = config.train
    tokens_per_step = t.batch_size * t.accum_steps * config.model.seq_len
    return max(1, math.ceil(len(corpus.train) / tokens_per_step))


def train(config: ExperimentConfig, corpus: Corpus | None = None, on_log=None) -> TrainResult:
    """Train one codec at ``config.train.lmbda``; returns the model with the best validation loss.

    One epoch is a full pass over the training split (in tokens) and ends with
    a validation pass; training stops after ``patience`` epochs without
    improvement. A non-finite loss restores the best weights and restarts
    with ``fallback_lr_max``; a second divergence aborts.
    """
    t = config.train
    if corpus is None:
        corpus = Corpus.load(t.corpus, t.corpus_chars, seed=t.seed)
    torch.manual_seed(t.seed)
    model = CodecModel(config)
    model.train()
    gen = torch.Generator().manual_seed(t.seed + 1)
    val_gen = torch.Generator().manual_seed(t.seed + 2)
    val_batches = [corpus.sample("val", t.batch_size, config.model.seq_len, val_gen) for _ in range(t.eval_batches)]
    mask = decay_mask(model)
    params = list(model.parameters())

    def fresh_optimizer():
        return AdamW(params, betas=tuple(t.betas), weight_decay=t.weight_decay, decay_mask=mask)

    opt = fresh_optimizer()
    lr_max = t.lr_max
    epoch_steps = t.eval_interval if t.eval_interval > 0 else steps_per_epoch(config, corpus)
    best_val = math.inf
    best_state = copy.deepcopy(model.state_dict())
    best_step = 0
    stale = 0
    restarts = 0
    result = TrainResult(model, 0, math.inf)
    start = time.perf_counter()
    step = 0
    while step < t.max_steps:
        lr = lr_schedule(step + 1, t.warmup_steps, t.max_steps, lr_max, t.lr_min)
        opt.zero_grad()
        acc = {"loss": 0.0, "distortion": 0.0, "bpt_y": 0.0, "bpt_w": 0.0}
        finite = True
        for _ in range(t.accum_steps):
            batch = corpus.sample("train", t.batch_size, config.model.seq_len, gen)
            terms = rd_loss(batch, model, t.lmbda)
            if not bool(torch.isfinite(terms.loss)):
                finite = False
                break
            (terms.loss / t.accum_steps).backward()
            acc["loss"] += float(terms.loss.detach()) / t.accum_steps
            acc["distortion"] += float(terms.distortion.detach()) / t.accum_steps
            acc["bpt_y"] += float(terms.rate_y.detach()) / t.accum_steps
            acc["bpt_w"] += float(terms.rate_w.detach()) / t.accum_steps
        grad_norm = clip_grad_norm(params, t.grad_clip) if finite else math.nan
        if not finite or not math.isfinite(grad_norm):
            restarts += 1
            if restarts > 1:
                raise DivergenceError(f"training diverged again at step {step} after restarting")
            log.warning("non-finite loss at step %d; restarting from step %d with lr_max=%g",
                        step, best_step, t.fallback_lr_max)
            model.load_state_dict(best_state)
            opt = fresh_optimizer()
            lr_max = t.fallback_lr_max
            step = best_step
            continue
        opt.step(lr)
        step += 1
        record = {"step": step, "lr": lr, **acc}
        result.log.append(record)
        if on_log is not None:
            on_log(record)
        if step % epoch_steps == 0 or step == t.max_steps:
            ev = evaluate(model, val_batches, t.lmbda)
            ev = {"step": step, "epoch": step / epoch_steps, **ev}
            result.evals.append(ev)
            if on_log is not None:
                on_log({"eval": True, **ev})
            if ev["loss"] < best_val:
                best_val, best_step, stale = ev["loss"], step, 0
                best_state = copy.deepcopy(model.state_dict())
            else:
                stale += 1
                if stale >= t.patience:
                    result.stopped_early = True
                    break
    model.load_state_dict(best_state)
    model.eval()
    result.step, result.best_val, result.restarts = best_step, best_val, restarts
    result.seconds = time.perf_counter() - start
    return result
