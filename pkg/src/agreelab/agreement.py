"""Translation and agreement losses.

* ``label_smoothed_nll`` - token-level cross-entropy against a target mixed with
  the uniform distribution.
* ``loss_main`` / ``loss_auxiliary`` - that loss for (x, y) and (z~, y) pairs.
* ``kl_agreement`` - per-position KL between the two teacher-forced predictive
  distributions, direction 1 = KL(P(y|x) || P(y|z~)), direction 2 the reverse.
* ``loss_bma`` - alpha-weighted sum of the two directions.
* ``loss_total`` - main + auxiliary + bma with ablation switches.
* ``code_switch`` - word replacement baseline for conventional agreement.

Every loss is a *sum over non-pad target tokens divided by a normaliser*.  The
normaliser defaults to the batch's own token count (a per-token mean); the
trainer passes the token count of the whole accumulation group instead so that
k micro-batches reproduce one fused batch exactly.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import DropoutKeys, Transformer, pad_batch, teacher_forcing
from .numerics import Tensor
from .tokenizer import PAD


class AgreementError(ValueError):
    pass


@dataclass(frozen=True)
class AgreementConfig:
    alpha: float = 0.5
    label_smoothing: float = 0.1
    ablate_kl1: bool = False
    ablate_kl2: bool = False
    use_auxiliary: bool = True
    stop_gradient: str = "none"  # none | x | z : which KL side is treated as a constant

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise AgreementError(f"alpha {self.alpha} outside [0, 1]")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise AgreementError(f"label_smoothing {self.label_smoothing} outside [0, 1)")
        if self.stop_gradient not in ("none", "x", "z"):
            raise AgreementError(f"unknown stop_gradient {self.stop_gradient!r}")

    @property
    def needs_aux_side(self) -> bool:
        return self.use_auxiliary or not (self.ablate_kl1 and self.ablate_kl2)

    @classmethod
    def ablated(cls, which: str | None, **kw) -> "AgreementConfig":
        """Config for an ablation name: None/'none', 'kl1', 'kl2', 'both', 'main-only'."""
        which = which or "none"
        flags = {
            "none": {},
            "kl1": {"ablate_kl1": True},
            "kl2": {"ablate_kl2": True},
            "both": {"ablate_kl1": True, "ablate_kl2": True},
            "main-only": {"ablate_kl1": True, "ablate_kl2": True, "use_auxiliary": False},
        }
        if which not in flags:
            raise AgreementError(f"unknown ablation {which!r}")
        return cls(**{**flags[which], **kw})


@dataclass
class LossBreakdown:
    main: Tensor
    auxiliary: Tensor
    kl1: Tensor
    kl2: Tensor
    bma: Tensor
    total: Tensor
    token_count: int
    alpha: float = field(default=0.5, repr=False)

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("main", "auxiliary", "kl1", "kl2", "bma", "total")}


def _zero() -> Tensor:
    return Tensor(0.0)


def smoothing_floor(vocab_size: int, smoothing: float) -> float:
    """Smallest achievable per-token label-smoothed loss.

    The optimum predicts q = (1 - s + s/V) on the target and s/V elsewhere, and
    the loss there is the entropy of q.
    """
    if smoothing == 0.0:
        return 0.0
    on = 1.0 - smoothing + smoothing / vocab_size
    off = smoothing / vocab_size
    return -(on * math.log(on) + (vocab_size - 1) * off * math.log(off))


def _mask_and_count(targets, pad_mask):
    targets = np.asarray(targets, dtype=np.int64)
    keep = (targets != PAD) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise AgreementError("batch contains only padding")
    return targets, keep, count


def label_smoothed_nll(logits: Tensor, targets, pad_mask=None, smoothing: float = 0.1,
                       denom: float | None = None) -> Tensor:
    """(1 - s) * NLL(target) + s * mean_v NLL(v), summed over kept tokens / denom.

    ``pad_mask`` is True where a token counts (defaults to ``targets != PAD``).
    """
    if not 0.0 <= smoothing < 1.0:
        raise AgreementError(f"smoothing {smoothing} outside [0, 1)")
    targets, keep, count = _mask_and_count(targets, pad_mask)
    logp = nx.log_softmax(logits, axis=-1)
    nll = -nx.pick(logp, np.where(keep, targets, 0))
    if smoothing > 0.0:
        per_tok = nll * (1.0 - smoothing) - nx.mean(logp, axis=-1) * smoothing
    else:
        per_tok = nll
    total = nx.tsum(per_tok * keep)
    return total * (1.0 / (count if denom is None else denom))


def kl_agreement(logits_x: Tensor, logits_z: Tensor, pad_mask, direction: int,
                 denom: float | None = None, stop_gradient: str = "none") -> Tensor:
    """Token-averaged KL between the x- and z~-conditioned predictive distributions.

    direction 1: KL(P(.|x) || P(.|z~)); direction 2: KL(P(.|z~) || P(.|x)).
    Both arguments stay differentiable unless ``stop_gradient`` names a side.
    """
    if logits_x.shape != logits_z.shape:
        raise AgreementError(f"shape mismatch {logits_x.shape} vs {logits_z.shape}")
    if direction not in (1, 2):
        raise AgreementError("direction must be 1 or 2")
    keep = np.asarray(pad_mask, dtype=bool)
    count = int(keep.sum())
    if count == 0:
        raise AgreementError("batch contains only padding")
    lx = nx.log_softmax(logits_x if stop_gradient != "x" else logits_x.detach(), axis=-1)
    lz = nx.log_softmax(logits_z if stop_gradient != "z" else logits_z.detach(), axis=-1)
    lp, lq = (lx, lz) if direction == 1 else (lz, lx)
    per_pos = nx.tsum(nx.exp(lp) * (lp - lq), axis=-1)
    return nx.tsum(per_pos * keep) * (1.0 / (count if denom is None else denom))


def loss_bma(kl1: Tensor, kl2: Tensor, config: AgreementConfig) -> Tensor:
    """alpha * kl1 + (1 - alpha) * kl2, with ablated directions dropped."""
    terms = []
    if not config.ablate_kl1:
        terms.append(nx.as_tensor(kl1) * config.alpha)
    if not config.ablate_kl2:
        terms.append(nx.as_tensor(kl2) * (1.0 - config.alpha))
    if not terms:
        return _zero()
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


# ---------------------------------------------------------------------------
# batch-level losses
# ---------------------------------------------------------------------------

@dataclass
class TriBatch:
    """Token ids for aligned (x, y, z~) triples; ``src_z`` may be None."""
    src_x: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    src_z: np.ndarray | None = None

    @classmethod
    def from_ids(cls, xs, ys, zs=None) -> "TriBatch":
        """xs/zs: tag-prefixed source id lists; ys: target piece ids ending in EOS."""
        tin, tout = teacher_forcing(ys)
        return cls(pad_batch(xs), tin, tout, None if zs is None else pad_batch(zs))

    @property
    def pad_mask(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def token_count(self) -> int:
        return int(self.pad_mask.sum())

    def __len__(self):
        return self.src_x.shape[0]


def _forward(model: Transformer, src, batch: TriBatch, train: bool, keys):
    return model.forward(src, batch.tgt_in, train=train, keys=keys)


def loss_main(model: Transformer, batch: TriBatch, smoothing: float = 0.1, train: bool = False,
              keys: DropoutKeys | None = None, denom: float | None = None) -> Tensor:
    logits = _forward(model, batch.src_x, batch, train, keys)
    return label_smoothed_nll(logits, batch.tgt_out, batch.pad_mask, smoothing, denom)


def loss_auxiliary(model: Transformer, batch: TriBatch, smoothing: float = 0.1, train: bool = False,
                   keys: DropoutKeys | None = None, denom: float | None = None) -> Tensor:
    if batch.src_z is None:
        raise AgreementError("auxiliary loss needs a synthetic source side")
    logits = _forward(model, batch.src_z, batch, train, keys)
    return label_smoothed_nll(logits, batch.tgt_out, batch.pad_mask, smoothing, denom)


def loss_total(model: Transformer, batch: TriBatch, config: AgreementConfig, train: bool = False,
               seed: int = 0, step: int = 0, denom: float | None = None) -> LossBreakdown:
    """main + auxiliary + alpha*kl1 + (1-alpha)*kl2 from one forward per source side.

    Dropout streams: 0 for the x side, 1 for the z~ side (independent masks).
    Ablated terms are not computed and reported as exactly 0.
    """
    if config.needs_aux_side and batch.src_z is None:
        raise AgreementError("auxiliary loss or KL agreement enabled but batch has no z~ side")
    mask = batch.pad_mask
    count = int(mask.sum())
    if count == 0:
        raise AgreementError("batch contains only padding")
    denom = count if denom is None else denom
    s = config.label_smoothing

    kx = DropoutKeys(seed, step, 0) if train else None
    logits_x = _forward(model, batch.src_x, batch, train, kx)
    main = label_smoothed_nll(logits_x, batch.tgt_out, mask, s, denom)

    aux = kl1 = kl2 = _zero()
    if config.needs_aux_side:
        kz = DropoutKeys(seed, step, 1) if train else None
        logits_z = _forward(model, batch.src_z, batch, train, kz)
        if config.use_auxiliary:
            aux = label_smoothed_nll(logits_z, batch.tgt_out, mask, s, denom)
        if not config.ablate_kl1:
            kl1 = kl_agreement(logits_x, logits_z, mask, 1, denom, config.stop_gradient)
        if not config.ablate_kl2:
            kl2 = kl_agreement(logits_x, logits_z, mask, 2, denom, config.stop_gradient)
    bma = loss_bma(kl1, kl2, config)
    total = main
    if config.use_auxiliary:
        total = total + aux
    if not (config.ablate_kl1 and config.ablate_kl2):
        total = total + bma
    return LossBreakdown(main, aux, kl1, kl2, bma, total, count, config.alpha)


# ---------------------------------------------------------------------------
# code-switching baseline
# ---------------------------------------------------------------------------

def code_switch(x_words, z_words, alignment, ratio: float, seed: int) -> list[str]:
    """Replace round(ratio * |alignment|) aligned words of x by their z counterparts.

    ``alignment`` is a list of (i, j) pairs meaning x_words[i] <-> z_words[j].
    Which pairs get replaced is drawn without replacement from ``seed``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise AgreementError(f"ratio {ratio} outside [0, 1]")
    alignment = list(alignment)
    if not alignment:
        raise AgreementError("code switching needs at least one alignment pair")
    n = int(round(ratio * len(alignment)))
    out = list(x_words)
    if n == 0:
        return out
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(alignment), size=n, replace=False)
    for k in sorted(chosen):
        i, j = alignment[k]
        out[i] = z_words[j]
    return out
