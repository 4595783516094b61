"""Training objectives: pooled contrastive terms, reconstruction NLL, and the
epoch-indexed weight schedules for the two auxiliary losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidArgumentError, NumericDomainError, ShapeError
from .representation import FragmentFeatures

SCHEDULE_KINDS = ("random", "increase", "decrease")
SCHEDULE_LOW = 0.0
SCHEDULE_HIGH = 0.3


def pool(fragments: FragmentFeatures, kind: str = "mean") -> Tensor:
    """Collapse fragment rows to one vector per example (masked rows excluded).

    Accepts (n, d) or (batch, n, d) features; returns (d,) or (batch, d).
    """
    mask = fragments.mask
    if not mask.any(axis=-1).all():
        raise InvalidArgumentError("pooling over fully masked fragments")
    feats = fragments.features
    if kind == "mean":
        weights = mask.astype(feats.data.dtype)
        weights /= weights.sum(axis=-1, keepdims=True)
        picked = ad.mul(feats, ad.constant(np.broadcast_to(weights[..., None], feats.shape).copy()))
        return ad.sum_(picked, axis=-2)
    if kind == "max":
        blocked = np.broadcast_to(~mask[..., None], feats.shape)
        filled = ad.masked_fill(feats, blocked, ad.neg_sentinel(feats.dtype))
        return ad.amax(filled, axis=-2)
    raise InvalidArgumentError(f"unknown pooling kind {kind!r}")


def _unit_rows(t: Tensor, what: str) -> Tensor:
    sq = ad.sum_(ad.mul(t, t), axis=-1, keepdims=True)
    norms = np.sqrt(sq.data)
    if (norms == 0).any():
        raise NumericDomainError(f"zero-norm pooled vector in {what}")
    return ad.div(t, ad.expand(ad.sqrt(sq), t.shape))


def info_nce(anchors: Tensor, positives: Tensor, temperature: float) -> Tensor:
    """Sum over items of -log softmax_i(cos(anchor_i, positive_j) / temperature).

    Every positive in the batch serves as the negative for the others. With a
    single item the loss is exactly zero.
    """
    if temperature <= 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    if anchors.ndim != 2 or positives.ndim != 2:
        raise ShapeError("info_nce expects (batch, d) anchors and positives")
    if anchors.shape != positives.shape:
        raise ShapeError(f"anchor/positive shapes differ: {anchors.shape} vs {positives.shape}")
    a = _unit_rows(anchors, "anchors")
    p = _unit_rows(positives, "positives")
    logits = ad.mul(ad.matmul(a, ad.transpose_last2(p)), 1.0 / float(temperature))
    log_probs = ad.log_softmax(logits, axis=-1)
    eye = np.eye(anchors.shape[0], dtype=anchors.data.dtype)
    return ad.neg(ad.sum_(ad.mul(log_probs, ad.constant(eye))))


def layered_info_nce(
    aligned_per_layer: list[FragmentFeatures | object],
    positives: FragmentFeatures,
    temperature: float,
    pooling: str = "mean",
) -> Tensor:
    """Accumulate the contrastive loss of every encoder layer against the same
    pooled layer-0 positives."""
    pooled_pos = pool(positives, pooling)
    total = None
    for layer_feats in aligned_per_layer:
        anchors = pool(
            FragmentFeatures(layer_feats.features, layer_feats.mask, "aligned"), pooling
        )
        term = info_nce(anchors, pooled_pos, temperature)
        total = term if total is None else ad.add(total, term)
    if total is None:
        raise InvalidArgumentError("no layers to accumulate")
    return total


def sequence_nll(logits: Tensor, target_ids: np.ndarray, target_mask: np.ndarray) -> Tensor:
    """Summed -log p(target) over unmasked positions, row-aligned with logits.

    logits: (..., length, vocab); target_ids/mask: (..., length).
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    target_mask = np.asarray(target_mask, dtype=bool)
    if logits.shape[:-1] != target_ids.shape or target_ids.shape != target_mask.shape:
        raise ShapeError(
            f"logits {logits.shape} misaligned with targets {target_ids.shape}"
        )
    vocab = logits.shape[-1]
    if target_ids.size and (target_ids.min() < 0 or target_ids.max() >= vocab):
        raise ShapeError(f"target id outside vocabulary of size {vocab}")
    log_probs = ad.log_softmax(logits, axis=-1)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(onehot, target_ids[..., None], 1.0, axis=-1)
    onehot *= target_mask[..., None]
    return ad.neg(ad.sum_(ad.mul(log_probs, ad.constant(onehot))))


@dataclass
class WeightSchedule:
    """Epoch-indexed weight for an auxiliary loss term, in [0, 0.3].

    `increase` climbs linearly from 0 to 0.3 over the horizon, `decrease`
    mirrors it, and `random` draws a reproducible uniform value per epoch.
    """

    kind: str
    horizon: int
    seed: int = 0
    low: float = SCHEDULE_LOW
    high: float = SCHEDULE_HIGH

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidArgumentError(f"kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.horizon < 1:
            raise InvalidArgumentError("horizon must be at least 1")

    def value(self, epoch: int) -> float:
        if not 0 <= epoch < self.horizon:
            raise InvalidArgumentError(f"epoch {epoch} outside horizon {self.horizon}")
        if self.kind == "random":
            rng = np.random.default_rng(np.random.SeedSequence([self.seed, epoch]))
            return float(rng.uniform(self.low, self.high))
        if self.horizon == 1:
            frac = 0.0
        else:
            frac = epoch / (self.horizon - 1)
        if self.kind == "decrease":
            frac = 1.0 - frac
        return self.low + (self.high - self.low) * frac


@dataclass
class LossBreakdown:
    """Per-batch record; every component is a batch mean except reg."""

    gene: float
    i2t: float
    t2i: float
    reg: float
    beta1: float
    beta2: float
    total: float

    FIELDS = ("gene", "i2t", "t2i", "beta1", "beta2", "reg", "total")

    def row(self) -> list[float]:
        return [getattr(self, f) for f in self.FIELDS]


def l2_norm(params) -> Tensor:
    """Global L2 norm over all parameter values."""
    acc = None
    for p in params:
        term = ad.sum_(ad.mul(p, p))
        acc = term if acc is None else ad.add(acc, term)
    if acc is None:
        raise InvalidArgumentError("no parameters")
    return ad.sqrt(acc)


def total_loss(
    gene_sum: Tensor,
    i2t_sum: Tensor | None,
    t2i_sum: Tensor | None,
    beta1: float,
    beta2: float,
    batch_size: int,
    params=None,
    weight_decay: float = 0.0,
) -> tuple[Tensor, LossBreakdown]:
    """mean-over-batch(gene + beta1 * i2t + beta2 * t2i) + weight_decay * ||params||.

    The contrastive sums may be None (ablated); they contribute exactly zero.
    """
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    if weight_decay < 0:
        raise InvalidArgumentError("weight_decay must be nonnegative")
    inv_b = 1.0 / float(batch_size)
    total = ad.mul(gene_sum, inv_b)
    i2t_val = t2i_val = 0.0
    if i2t_sum is not None and beta1 != 0.0:
        total = ad.add(total, ad.mul(i2t_sum, beta1 * inv_b))
    if t2i_sum is not None and beta2 != 0.0:
        total = ad.add(total, ad.mul(t2i_sum, beta2 * inv_b))
    if i2t_sum is not None:
        i2t_val = i2t_sum.item() * inv_b
    if t2i_sum is not None:
        t2i_val = t2i_sum.item() * inv_b
    reg_val = 0.0
    if params is not None and weight_decay > 0.0:
        reg = ad.mul(l2_norm(params), weight_decay)
        total = ad.add(total, reg)
        reg_val = reg.item()
    if not np.isfinite(total.data).all():
        raise NumericDomainError("non-finite total loss")
    breakdown = LossBreakdown(
        gene=gene_sum.item() * inv_b,
        i2t=i2t_val,
        t2i=t2i_val,
        reg=reg_val,
        beta1=float(beta1),
        beta2=float(beta2),
        total=total.item(),
    )
    return total, breakdown
