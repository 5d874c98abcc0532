"""Adam with warmup, gradient accumulation, and the agreement fine-tuning loop."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .agreement import AgreementConfig, LossBreakdown, TriBatch, loss_total
from .data import EncodedRecord, batch_iter, encode_record
from .model import Transformer, pad_batch, teacher_forcing
from .tokenizer import Vocabulary

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1e-3
    warmup_steps: int = 200
    schedule: str = "constant"  # constant | inverse_sqrt
    beta1: float = 0.9
    beta2: float = 0.98
    eps_adam: float = 1e-8
    tokens_per_batch: int = 2048
    accumulation_steps: int = 1
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    record_wall_time: bool = False
    agreement: AgreementConfig = field(default_factory=AgreementConfig)

    def __post_init__(self):
        if self.lr_peak <= 0 or self.eps_adam <= 0:
            raise TrainingError("rates must be positive")
        if self.warmup_steps < 1:
            raise TrainingError("warmup_steps must be >= 1")
        if self.accumulation_steps < 1 or self.tokens_per_batch < 1:
            raise TrainingError("accumulation_steps and tokens_per_batch must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise TrainingError("betas must lie in [0, 1)")
        if self.schedule not in ("constant", "inverse_sqrt"):
            raise TrainingError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("agreement"), dict):
            d["agreement"] = AgreementConfig(**d["agreement"])
        return cls(**d)


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear warmup to ``lr_peak`` at ``warmup_steps``; then constant (or 1/sqrt decay)."""
    if step < 1:
        raise TrainingError("steps are 1-based")
    w = config.warmup_steps
    if step <= w:
        return config.lr_peak * step / w
    if config.schedule == "inverse_sqrt":
        return config.lr_peak * math.sqrt(w / step)
    return config.lr_peak


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def create(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: OptimizerState, lr: float,
              beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8) -> OptimizerState:
    """Bias-corrected Adam, updating ``params[k].data`` in place."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in {k!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for k in sorted(grads):
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[k].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

def make_tribatch(batch: list[EncodedRecord]) -> TriBatch:
    tin, tout = teacher_forcing([e.tgt for e in batch])
    src_x = pad_batch([e.src for e in batch])
    if all(e.aux is not None for e in batch):
        return TriBatch(src_x, tin, tout, pad_batch([e.aux for e in batch]))
    if any(e.aux is not None for e in batch):
        raise TrainingError("batch mixes records with and without an aux side")
    return TriBatch(src_x, tin, tout, None)


def micro_batches(records, vocab: Vocabulary, config: TrainConfig):
    """Endless stream of micro-batches, reshuffled every epoch."""
    encoded = [encode_record(r, vocab, i) for i, r in enumerate(records)]
    if not encoded:
        raise TrainingError("empty dataset")
    epoch = 0
    while True:
        for b in batch_iter(None, vocab, config.tokens_per_batch, config.seed, epoch, encoded=encoded):
            yield b
        epoch += 1


def step_losses(model: Transformer, group: list[TriBatch], agreement: AgreementConfig, train: bool,
                seed: int, step: int, accumulate: bool = True) -> dict:
    """Gradient accumulation over one optimizer step.

    Each micro-batch contributes ``sum / total_tokens`` so the accumulated
    gradient equals that of the fused batch.  Pair-only micro-batches (no z~,
    e.g. back-translated data) contribute to the main loss only.
    """
    total_tokens = sum(b.token_count for b in group)
    parts = {"main": 0.0, "auxiliary": 0.0, "kl1": 0.0, "kl2": 0.0}
    for i, b in enumerate(group):
        cfg = agreement
        if b.src_z is None:
            cfg = replace(agreement, ablate_kl1=True, ablate_kl2=True, use_auxiliary=False)
        br: LossBreakdown = loss_total(model, b, cfg, train=train, seed=seed,
                                       step=step * 1000 + i, denom=total_tokens)
        if accumulate:
            nx.backward(br.total)
        for k in parts:
            parts[k] += getattr(br, k).item()
    a = agreement.alpha
    bma = a * parts["kl1"] + (1.0 - a) * parts["kl2"]
    parts["bma"] = bma
    parts["total"] = parts["main"] + parts["auxiliary"] + bma
    parts["tokens"] = total_tokens
    return parts


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: Transformer
    state: OptimizerState
    metrics: list


def finetune(model: Transformer, vocab: Vocabulary, records, config: TrainConfig,
             out_dir=None, train_mode: bool = True, callback=None) -> TrainResult:
    """Optimise ``loss_total`` for ``config.max_steps`` optimizer steps.

    ``records`` mixes tri-parallel records (with aux) and plain pairs; each step
    consumes ``accumulation_steps`` micro-batches.  If ``out_dir`` is given,
    ``metrics.jsonl`` gets one line per step and ``final.ckpt`` the weights
    (plus ``step_<n>.ckpt`` every ``checkpoint_every`` steps).
    """
    records = list(records)
    if not records:
        raise TrainingError("empty dataset")
    stream = micro_batches(records, vocab, config)
    state = OptimizerState.create(model.params)
    metrics = []
    out = Path(out_dir) if out_dir is not None else None
    mfh = tfh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        mfh = open(out / "metrics.jsonl", "w")
        tfh = open(out / "timing.jsonl", "w")
    try:
        for step in range(1, config.max_steps + 1):
            t0 = time.perf_counter()
            group = [make_tribatch(next(stream)) for _ in range(config.accumulation_steps)]
            model.zero_grad()
            parts = step_losses(model, group, config.agreement, train_mode, config.seed, step)
            lr = lr_at(step, config)
            grads = {k: p.grad for k, p in model.params.items()}
            try:
                adam_step(model.params, grads, state, lr, config.beta1, config.beta2, config.eps_adam)
            except TrainingError:
                log.error("aborting: non-finite gradient at step %d (loss %r)", step, parts)
                raise
            seconds = time.perf_counter() - t0
            rec = {"step": step, "lr": lr, "main": parts["main"], "auxiliary": parts["auxiliary"],
                   "kl1": parts["kl1"], "kl2": parts["kl2"], "bma": parts["bma"], "total": parts["total"],
                   "tokens": parts["tokens"], "seconds": seconds if config.record_wall_time else None}
            metrics.append(rec)
            if mfh is not None:
                mfh.write(json.dumps(rec) + "\n")
                tfh.write(json.dumps({"step": step, "seconds": seconds}) + "\n")
            if out is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
                _checkpoint(model, vocab, out / f"step_{step}.ckpt", step)
            if callback is not None:
                callback(step, rec, model)
        if out is not None:
            _checkpoint(model, vocab, out / "final.ckpt", config.max_steps)
    finally:
        if mfh is not None:
            mfh.close()
            tfh.close()
    return TrainResult(model, state, metrics)


def _checkpoint(model, vocab, path, step):
    try:
        model.save(path, vocab.digest(), {"step": step})
    except OSError as exc:
        raise TrainingError(f"checkpoint write failed at step {step}: {exc}; "
                            f"last good checkpoint left untouched") from exc


def evaluate_loss(model: Transformer, vocab: Vocabulary, records, agreement: AgreementConfig,
                  tokens_per_batch: int = 4096) -> dict:
    """Eval-mode token-averaged losses over ``records`` (no gradients)."""
    encoded = [encode_record(r, vocab, i) for i, r in enumerate(records)]
    cfg = TrainConfig(tokens_per_batch=tokens_per_batch, agreement=agreement)
    group = [make_tribatch(b) for b in batch_iter(None, vocab, tokens_per_batch, 0, 0, encoded=encoded)]
    with nx.no_grad():
        return step_losses(model, group, cfg.agreement, False, 0, 0, accumulate=False)
