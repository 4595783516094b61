"""One cross-modal alignment layer.

The layer attends every fragment of a stream over the fragments of the other
modality (cosine similarity, thresholded column normalization, sharpened
softmax) and then refreshes the stream state through a forgetting gate.
Stacking these layers is the encoder's job (see :mod:`alignsum.model`).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import LayerNorm, MultiHeadAttention, init_weight, init_zeros
from .autodiff import Tensor
from .errors import InvalidArgumentError, NumericDomainError, ShapeError
from .representation import FragmentFeatures

# guard for the column-normalization denominator
NORM_EPS = 1e-8


@dataclass
class AlignmentFeatures:
    """Attended summaries of the opposite modality, one row per source fragment."""

    features: Tensor
    mask: np.ndarray


def cosine_similarity_matrix(x: FragmentFeatures, y: FragmentFeatures) -> Tensor:
    """Pairwise cosine similarities; masked rows/columns get the negative sentinel."""
    if x.width != y.width:
        raise ShapeError(f"feature widths differ: {x.width} vs {y.width}")
    _reject_zero_rows(x)
    _reject_zero_rows(y)
    dots = ad.matmul(x.features, ad.transpose_last2(y.features))
    nx = _row_norms(x)
    ny = _row_norms(y)
    denom = ad.matmul(nx, ad.transpose_last2(ny))
    sims = ad.div(dots, denom)
    blocked = ~x.mask[..., :, None] | ~y.mask[..., None, :]
    if blocked.any():
        sims = ad.masked_fill(sims, blocked, ad.neg_sentinel(sims.dtype))
    return sims


def _row_norms(f: FragmentFeatures) -> Tensor:
    sq = ad.sum_(ad.mul(f.features, f.features), axis=-1, keepdims=True)
    norms = ad.sqrt(sq)
    if not f.mask.all():
        # masked rows may be anything; keep the division well-defined
        norms = ad.masked_fill(norms, ~f.mask[..., None], 1.0)
    return norms


def _reject_zero_rows(f: FragmentFeatures) -> None:
    norms = np.sqrt((f.features.data**2).sum(axis=-1))
    bad = (norms == 0) & f.mask
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise NumericDomainError(f"zero-norm {f.modality} fragment at index {idx}")


def normalize_similarity(
    sims: Tensor,
    x_mask: np.ndarray,
    y_mask: np.ndarray,
    shift: float,
    relu_in_denominator: bool = False,
) -> Tensor:
    """Shift by `shift`, clamp negatives, and normalize each column.

    The denominator is the per-column root sum of squares of the shifted
    scores over valid rows; by default the clamp applies to the numerator
    only, with `relu_in_denominator` switching to the clamped-both variant.
    """
    if not np.isfinite(shift):
        raise InvalidArgumentError(f"shift must be finite, got {shift}")
    shifted = ad.add(sims, float(shift))
    valid = (x_mask[..., :, None] & y_mask[..., None, :]).astype(sims.dtype)
    base = ad.relu(shifted) if relu_in_denominator else shifted
    contrib = ad.mul(base, ad.constant(valid))
    col_sq = ad.sum_(ad.mul(contrib, contrib), axis=-2, keepdims=True)
    denom = ad.sqrt(ad.add(col_sq, NORM_EPS))
    return ad.div(ad.relu(shifted), ad.expand(denom, sims.shape))


def attend(
    sims_norm: Tensor,
    reference: FragmentFeatures,
    sharpness: float,
) -> tuple[Tensor, Tensor]:
    """Sharpened-softmax attention over the reference fragments.

    Returns (attended features, attention weights). Masked reference columns
    receive exactly zero weight.
    """
    if sharpness <= 0:
        raise InvalidArgumentError(f"sharpness must be positive, got {sharpness}")
    if (~reference.mask).all(axis=-1).any():
        raise InvalidArgumentError("attention over a fully masked reference")
    pre = sims_norm
    if not reference.mask.all():
        pre = ad.masked_fill(pre, ~reference.mask[..., None, :], ad.neg_sentinel(pre.dtype))
    weights = ad.scaled_softmax(pre, scale=float(sharpness), axis=-1)
    return ad.matmul(weights, reference.features), weights


class FusionGate:
    """Forgetting gate blending a stream state with its attended features."""

    def __init__(self, name: str, width: int, rng: np.random.Generator):
        self.w_gate = init_weight(f"{name}/w_gate", (2 * width, width), rng)
        self.b_gate = init_zeros(f"{name}/b_gate", width)
        self.w_cand = init_weight(f"{name}/w_cand", (2 * width, width), rng)
        self.b_cand = init_zeros(f"{name}/b_cand", width)

    def parameters(self):
        return [self.w_gate, self.b_gate, self.w_cand, self.b_cand]


def gated_update(
    state: Tensor,
    aligned: Tensor,
    gate: FusionGate,
    gate_override: float | None = None,
) -> Tensor:
    """(1 - g) * state + g * candidate, with g and candidate read from [state, aligned].

    `gate_override` pins g to a constant (test hook for full retention 0.0 /
    full replacement 1.0).
    """
    if state.shape != aligned.shape:
        raise ShapeError(f"state {state.shape} and aligned {aligned.shape} differ")
    joint = ad.concat([state, aligned], axis=-1)
    if gate_override is None:
        g = ad.sigmoid(ad.add(ad.matmul(joint, gate.w_gate), gate.b_gate))
    else:
        if not 0.0 <= gate_override <= 1.0:
            raise InvalidArgumentError("gate_override must lie in [0, 1]")
        g = ad.constant(np.full(state.shape, gate_override))
    candidate = ad.tanh(ad.add(ad.matmul(joint, gate.w_cand), gate.b_cand))
    keep = ad.sub(1.0, g)
    return ad.add(ad.mul(keep, state), ad.mul(g, candidate))


class AlignmentLayer:
    """One align-and-refresh step of a stream against a fixed reference."""

    def __init__(
        self,
        name: str,
        width: int,
        rng: np.random.Generator,
        self_attention: bool = False,
        heads: int = 4,
    ):
        self.gate = FusionGate(f"{name}/gate", width, rng)
        self.self_attn = None
        self.self_attn_norm = None
        if self_attention:
            self.self_attn = MultiHeadAttention(f"{name}/self_attn", width, heads, rng)
            self.self_attn_norm = LayerNorm(f"{name}/self_attn_norm", width)

    def parameters(self):
        params = list(self.gate.parameters())
        if self.self_attn is not None:
            params += self.self_attn.parameters()
            params += self.self_attn_norm.parameters()
        return params

    def forward(
        self,
        state: FragmentFeatures,
        reference: FragmentFeatures,
        shift: float,
        sharpness: float,
        relu_in_denominator: bool = False,
        gate_override: float | None = None,
    ) -> tuple[AlignmentFeatures, FragmentFeatures]:
        feats = state.features
        if self.self_attn is not None:
            feats = self._with_self_attention(feats, state.mask)
            state = FragmentFeatures(feats, state.mask, state.modality)
        sims = cosine_similarity_matrix(state, reference)
        sims_norm = normalize_similarity(
            sims, state.mask, reference.mask, shift, relu_in_denominator
        )
        aligned, _ = attend(sims_norm, reference, sharpness)
        refreshed = gated_update(feats, aligned, self.gate, gate_override)
        return (
            AlignmentFeatures(aligned, state.mask),
            FragmentFeatures(refreshed, state.mask, state.modality),
        )

    def _with_self_attention(self, feats: Tensor, mask: np.ndarray) -> Tensor:
        squeeze = feats.ndim == 2
        if squeeze:
            feats = ad.reshape(feats, (1,) + feats.shape)
            mask = mask[None]
        block = ~mask[:, None, :]
        normed = self.self_attn_norm(feats)
        out = ad.add(feats, self.self_attn(normed, normed, block))
        if squeeze:
            out = ad.reshape(out, out.shape[1:])
        return out
