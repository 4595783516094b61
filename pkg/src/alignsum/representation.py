"""Raw text and images -> per-fragment embedding matrices.

Text fragments are word tokens; image fragments are flattened square patches
projected into the shared model width. Both come out as
:class:`FragmentFeatures`: a (rows x width) tensor plus a validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import (
    FormatError,
    InvalidArgumentError,
    ShapeError,
    VocabularyError,
)

UNK, PAD, SOS, EOS = 0, 1, 2, 3
RESERVED_TOKENS = ("<unk>", "<pad>", "<sos>", "<eos>")


class Vocabulary:
    """Bijective token <-> id map with four reserved ids at positions 0-3."""

    def __init__(self, tokens):
        tokens = list(tokens)
        if tokens[:4] != list(RESERVED_TOKENS):
            raise FormatError(f"vocabulary must start with {RESERVED_TOKENS}")
        if len(set(tokens)) != len(tokens):
            raise FormatError("vocabulary contains duplicate tokens")
        self._tokens = tokens
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    @classmethod
    def build(cls, extra_tokens) -> "Vocabulary":
        seen = []
        for tok in extra_tokens:
            if tok in RESERVED_TOKENS or tok in seen:
                continue
            seen.append(tok)
        return cls(list(RESERVED_TOKENS) + seen)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id_of(self, token: str) -> int:
        return self._ids.get(token, UNK)

    def token_of(self, idx: int) -> str:
        if not 0 <= idx < len(self._tokens):
            raise VocabularyError(f"id {idx} outside vocabulary of size {len(self._tokens)}")
        return self._tokens[idx]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self._tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        return cls(tokens)


def tokenize(text: str) -> list[str]:
    """Lowercased whitespace tokenization."""
    return text.lower().split()


@dataclass
class TokenSequence:
    """Token ids with a parallel validity mask (False marks trailing padding)."""

    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.ids.shape != self.mask.shape:
            raise ShapeError("ids and mask lengths differ")
        # padding must be a trailing suffix
        m = self.mask.reshape(-1, self.mask.shape[-1]) if self.mask.ndim > 1 else self.mask[None]
        for row in m:
            if row.size and not np.all(row[: int(row.sum())]):
                raise FormatError("mask may only be false on a trailing suffix")

    def __len__(self) -> int:
        return int(self.ids.shape[-1])

    def tokens(self, vocab: Vocabulary) -> list[str]:
        return [vocab.token_of(int(i)) for i, keep in zip(self.ids, self.mask) if keep]


def encode_text(text: str, vocab: Vocabulary, max_len: int) -> TokenSequence:
    """<sos> tokens... <eos>, truncated at max_len with <eos> forced last."""
    if max_len < 2:
        raise InvalidArgumentError("max_len must allow <sos> and <eos>")
    ids = [SOS] + [vocab.id_of(t) for t in tokenize(text)] + [EOS]
    if len(ids) > max_len:
        ids = ids[: max_len - 1] + [EOS]
    return TokenSequence(np.array(ids), np.ones(len(ids), dtype=bool))


def pad_sequences(seqs: list[TokenSequence], length: int | None = None):
    """Stack sequences into (batch, length) ids/mask arrays, <pad>-filled."""
    want = length or max(len(s) for s in seqs)
    ids = np.full((len(seqs), want), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), want), dtype=bool)
    for i, s in enumerate(seqs):
        n = len(s)
        if n > want:
            raise ShapeError(f"sequence of length {n} exceeds pad length {want}")
        ids[i, :n] = s.ids
        mask[i, :n] = s.mask
    return ids, mask


@dataclass
class ImageTensor:
    """Channel-major pixel block with values in [0, 1]."""

    data: np.ndarray  # (C, H, W)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeError(f"image must be (C, H, W), got {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass
class FragmentFeatures:
    """Per-fragment embeddings: (..., n, d) tensor, (..., n) mask, modality tag."""

    features: Tensor
    mask: np.ndarray
    modality: str = "text"

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.features.shape[:-1] != self.mask.shape:
            raise ShapeError(
                f"features {self.features.shape} inconsistent with mask {self.mask.shape}"
            )

    @property
    def width(self) -> int:
        return int(self.features.shape[-1])

    @property
    def count(self) -> int:
        return int(self.features.shape[-2])


def sinusoid_table(length: int, width: int, dtype=None) -> np.ndarray:
    """Fixed positional encoding: sin on even dims, cos on odd dims."""
    dtype = dtype or ad.default_dtype()
    pos = np.arange(length, dtype=np.float64)[:, None]
    dim = np.arange(width, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * np.floor(dim / 2.0) / width)
    table = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


def apply_dropout(t: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when rng is None (inference) or rate is 0."""
    if rng is None or rate <= 0.0:
        return t
    if not 0.0 <= rate < 1.0:
        raise InvalidArgumentError(f"dropout rate {rate} outside [0, 1)")
    keep = (rng.random(t.shape) >= rate).astype(t.data.dtype) / (1.0 - rate)
    return ad.mul(t, ad.constant(keep))


def embed_text(
    ids: np.ndarray,
    mask: np.ndarray,
    token_table: Parameter,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> FragmentFeatures:
    """Token rows from the learned table plus the fixed sinusoid, per position."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab_size = token_table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab_size):
        bad = int(ids.max() if ids.max() >= vocab_size else ids.min())
        raise VocabularyError(f"token id {bad} outside table of size {vocab_size}")
    rows = ad.gather_rows(token_table, ids)
    positions = sinusoid_table(ids.shape[-1], int(token_table.shape[1]), token_table.dtype)
    out = ad.add(rows, ad.constant(positions))
    out = apply_dropout(out, dropout, rng)
    return FragmentFeatures(out, np.asarray(mask, dtype=bool), modality="text")


def patchify(img: ImageTensor, patch_size: int) -> np.ndarray:
    """Split (C, H, W) into row-major patches, each flattened channel-major.

    Returns an (M, C * P * P) array with M = (H/P) * (W/P).
    """
    c, h, w = img.channels, img.height, img.width
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    # (C,H,W) -> (gh, gw, C, P, P) -> (M, C*P*P); channel varies slowest
    blocks = img.data.reshape(c, gh, p, gw, p).transpose(1, 3, 0, 2, 4)
    return np.ascontiguousarray(blocks).reshape(gh * gw, c * p * p)


def unpatchify(patches: np.ndarray, channels: int, height: int, width: int, patch_size: int) -> ImageTensor:
    """Inverse of :func:`patchify`; bit-exact round trip."""
    p = patch_size
    gh, gw = height // p, width // p
    blocks = patches.reshape(gh, gw, channels, p, p).transpose(2, 0, 3, 1, 4)
    return ImageTensor(np.ascontiguousarray(blocks).reshape(channels, height, width))


def project_patches(patches: np.ndarray, projection: Parameter) -> FragmentFeatures:
    """Linear map of raw patch vectors into the model width; no image padding."""
    patches = np.asarray(patches)
    if patches.shape[-1] != projection.shape[0]:
        raise ShapeError(
            f"patch width {patches.shape[-1]} does not match projection {projection.shape}"
        )
    out = ad.matmul(ad.constant(patches), projection)
    mask = np.ones(patches.shape[:-1], dtype=bool)
    return FragmentFeatures(out, mask, modality="image")


def embed_image(
    img_batch: np.ndarray,
    projection: Parameter,
    patch_size: int,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    positional: bool = False,
) -> FragmentFeatures:
    """Patchify + project a (B, C, H, W) batch (or one (C, H, W) image)."""
    arr = np.asarray(img_batch)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    stacks = np.stack([patchify(ImageTensor(im), patch_size) for im in arr])
    feats = project_patches(stacks if not single else stacks[0], projection)
    out = feats.features
    if positional:
        table = sinusoid_table(out.shape[-2], int(projection.shape[1]), projection.dtype)
        out = ad.add(out, ad.constant(table))
    out = apply_dropout(out, dropout, rng)
    return FragmentFeatures(out, feats.mask, modality="image")
