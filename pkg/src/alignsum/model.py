"""The full summarization network.

A dual-stream encoder iterates alignment layers over the text and image
fragment sets (each stream always attends the *original* embedding of the
other modality), collecting per-layer aligned features for the contrastive
objectives. A causal transformer decoder reconstructs the summary from the
final text-side aligned features only; the image stream shapes the encoder
through training but never reaches the decoder directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .alignment import AlignmentFeatures, AlignmentLayer
from .attention import FeedForward, LayerNorm, MultiHeadAttention, init_weight, init_zeros
from .autodiff import Parameter, Tensor
from .errors import FormatError, InvalidArgumentError, ShapeError
from .representation import (
    SOS,
    EOS,
    FragmentFeatures,
    apply_dropout,
    embed_image,
    embed_text,
)


@dataclass
class ModelConfig:
    vocab_size: int = 512
    width: int = 64
    alignment_layers: int = 2
    decoder_layers: int = 2
    decoder_heads: int = 4
    decoder_ff: int = 256
    dropout: float = 0.3
    similarity_shift: float = -0.15
    attention_sharpness: float = 6.0
    contrastive_temperature: float = 0.1
    patch_size: int = 4
    image_channels: int = 1
    max_text_len: int = 500
    max_summary_len: int = 32
    pooling: str = "mean"
    relu_in_denominator: bool = False
    self_attention_in_alignment: bool = False
    share_gates: bool = False
    tie_output: bool = False
    image_positional: bool = False

    def __post_init__(self):
        if self.width % self.decoder_heads:
            raise InvalidArgumentError(
                f"width {self.width} not divisible by {self.decoder_heads} heads"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidArgumentError(f"dropout {self.dropout} outside [0, 1)")
        if self.alignment_layers < 1:
            raise InvalidArgumentError("need at least one alignment layer")
        if self.attention_sharpness <= 0 or self.contrastive_temperature <= 0:
            raise InvalidArgumentError("sharpness and temperature must be positive")
        if self.pooling not in ("mean", "max"):
            raise InvalidArgumentError(f"unknown pooling {self.pooling!r}")

    @property
    def patch_width(self) -> int:
        return self.image_channels * self.patch_size**2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class EncoderOutput:
    """Everything the losses and decoder need from one encoder pass."""

    text_aligned: list[AlignmentFeatures]
    image_aligned: list[AlignmentFeatures]
    text_states: list[FragmentFeatures]
    image_states: list[FragmentFeatures]
    text_original: FragmentFeatures
    image_original: FragmentFeatures


class DecoderLayer:
    def __init__(self, name: str, width: int, heads: int, ff: int, rng):
        self.norm_self = LayerNorm(f"{name}/norm_self", width)
        self.self_attn = MultiHeadAttention(f"{name}/self_attn", width, heads, rng)
        self.norm_cross = LayerNorm(f"{name}/norm_cross", width)
        self.cross_attn = MultiHeadAttention(f"{name}/cross_attn", width, heads, rng)
        self.norm_ff = LayerNorm(f"{name}/norm_ff", width)
        self.ff = FeedForward(f"{name}/ff", width, ff, rng)

    def parameters(self):
        out = []
        for block in (self.norm_self, self.self_attn, self.norm_cross, self.cross_attn, self.norm_ff, self.ff):
            out += block.parameters()
        return out

    def __call__(self, x, memory, causal_block, memory_block, dropout, rng):
        normed = self.norm_self(x)
        x = ad.add(x, apply_dropout(self.self_attn(normed, normed, causal_block), dropout, rng))
        x = ad.add(
            x,
            apply_dropout(self.cross_attn(self.norm_cross(x), memory, memory_block), dropout, rng),
        )
        x = ad.add(x, apply_dropout(self.ff(self.norm_ff(x)), dropout, rng))
        return x


class Summarizer:
    """Dual-stream alignment encoder + causal decoder over a shared vocabulary."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        c = config
        self.token_table = init_weight("embed/tokens", (c.vocab_size, c.width), rng)
        self.patch_projection = init_weight(
            "embed/patch_projection", (c.patch_width, c.width), rng
        )
        if c.share_gates:
            shared = AlignmentLayer(
                "encoder/shared", c.width, rng,
                self_attention=c.self_attention_in_alignment, heads=c.decoder_heads,
            )
            self.text_layers = [shared] * c.alignment_layers
            self.image_layers = [shared] * c.alignment_layers
        else:
            self.text_layers = [
                AlignmentLayer(
                    f"encoder/text/{k}", c.width, rng,
                    self_attention=c.self_attention_in_alignment, heads=c.decoder_heads,
                )
                for k in range(c.alignment_layers)
            ]
            self.image_layers = [
                AlignmentLayer(
                    f"encoder/image/{k}", c.width, rng,
                    self_attention=c.self_attention_in_alignment, heads=c.decoder_heads,
                )
                for k in range(c.alignment_layers)
            ]
        self.decoder_layers = [
            DecoderLayer(f"decoder/{i}", c.width, c.decoder_heads, c.decoder_ff, rng)
            for i in range(c.decoder_layers)
        ]
        self.decoder_norm = LayerNorm("decoder/final_norm", c.width)
        if c.tie_output:
            self.out_weight = None
        else:
            self.out_weight = init_weight("decoder/out_w", (c.width, c.vocab_size), rng)
        self.out_bias = init_zeros("decoder/out_b", c.vocab_size)
        self._check_unique_names()

    def _check_unique_names(self):
        seen = set()
        for p in self.parameters():
            if p.name in seen:
                raise InvalidArgumentError(f"duplicate parameter name {p.name}")
            seen.add(p.name)

    def parameters(self) -> list[Parameter]:
        params: list[Parameter] = [self.token_table, self.patch_projection]
        picked = {id(self.token_table), id(self.patch_projection)}
        for layer in self.text_layers + self.image_layers:
            for p in layer.parameters():
                if id(p) not in picked:
                    picked.add(id(p))
                    params.append(p)
        for dl in self.decoder_layers:
            params += dl.parameters()
        params += self.decoder_norm.parameters()
        if self.out_weight is not None:
            params.append(self.out_weight)
        params.append(self.out_bias)
        return params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    # --- embedding -------------------------------------------------------

    def embed_text_batch(self, ids, mask, rng=None) -> FragmentFeatures:
        return embed_text(ids, mask, self.token_table, self.config.dropout, rng)

    def embed_image_batch(self, images, rng=None) -> FragmentFeatures:
        return embed_image(
            images,
            self.patch_projection,
            self.config.patch_size,
            self.config.dropout,
            rng,
            positional=self.config.image_positional,
        )

    # --- encoder ----------------------------------------------------------

    def encode(self, text: FragmentFeatures, image: FragmentFeatures) -> EncoderOutput:
        """Iterate both streams; the reference side is always the original
        embedding of the opposite modality."""
        c = self.config
        t_state, i_state = text, image
        text_aligned, image_aligned = [], []
        text_states, image_states = [], []
        for k in range(c.alignment_layers):
            try:
                ta, t_next = self.text_layers[k].forward(
                    t_state, image, c.similarity_shift, c.attention_sharpness,
                    c.relu_in_denominator,
                )
                ia, i_next = self.image_layers[k].forward(
                    i_state, text, c.similarity_shift, c.attention_sharpness,
                    c.relu_in_denominator,
                )
            except (ShapeError, InvalidArgumentError) as exc:
                raise type(exc)(f"encoder layer {k}: {exc}") from exc
            text_aligned.append(ta)
            image_aligned.append(ia)
            text_states.append(t_next)
            image_states.append(i_next)
            t_state, i_state = t_next, i_next
        return EncoderOutput(
            text_aligned=text_aligned,
            image_aligned=image_aligned,
            text_states=text_states,
            image_states=image_states,
            text_original=text,
            image_original=image,
        )

    # --- decoder ----------------------------------------------------------

    def _logits(self, hidden: Tensor) -> Tensor:
        if self.out_weight is not None:
            return ad.add(ad.matmul(hidden, self.out_weight), self.out_bias)
        return ad.add(ad.matmul(hidden, ad.transpose_last2(self.token_table)), self.out_bias)

    def decode_train(
        self,
        encoder_out: EncoderOutput,
        target_ids: np.ndarray,
        target_mask: np.ndarray | None = None,
        rng: np.random.Generator | None = None,
    ) -> Tensor:
        """Teacher-forced logits: row t is the next-token distribution after
        consuming target positions <= t. Only the final text-side aligned
        features serve as cross-attention memory."""
        target_ids = np.asarray(target_ids, dtype=np.int64)
        squeeze = target_ids.ndim == 1
        if squeeze:
            target_ids = target_ids[None]
        if target_mask is None:
            target_mask = np.ones_like(target_ids, dtype=bool)
        else:
            target_mask = np.asarray(target_mask, dtype=bool)
            if squeeze and target_mask.ndim == 1:
                target_mask = target_mask[None]
        if (target_ids[:, 0] != SOS).any():
            raise FormatError("target sequences must begin with <sos>")
        memory_feats = encoder_out.text_aligned[-1]
        memory = memory_feats.features
        mem_mask = memory_feats.mask
        if memory.ndim == 2:
            memory = ad.reshape(memory, (1,) + memory.shape)
            mem_mask = mem_mask[None]
        b, length = target_ids.shape
        emb = embed_text(target_ids, target_mask, self.token_table, self.config.dropout, rng)
        x = emb.features
        causal = np.triu(np.ones((length, length), dtype=bool), k=1)
        mem_block = ~mem_mask[:, None, :]
        for layer in self.decoder_layers:
            x = layer(x, memory, causal, mem_block, self.config.dropout, rng)
        logits = self._logits(self.decoder_norm(x))
        if squeeze:
            logits = ad.reshape(logits, logits.shape[1:])
        return logits

    def generate(self, encoder_out: EncoderOutput, max_len: int) -> list[np.ndarray]:
        """Greedy decoding per example until <eos> or max_len tokens.

        Ties break toward the lowest token id. Returns one id array per
        example, each beginning with <sos>.
        """
        if max_len < 2:
            raise InvalidArgumentError("max_len must be at least 2")
        memory = encoder_out.text_aligned[-1]
        batched = memory.features.ndim == 3
        batch = memory.features.shape[0] if batched else 1
        ids = np.full((batch, 1), SOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        while ids.shape[1] < max_len and not done.all():
            logits = self.decode_train(encoder_out, ids if batched else ids[0])
            data = logits.data if batched else logits.data[None]
            nxt = np.argmax(data[:, -1, :], axis=-1)
            nxt = np.where(done, EOS, nxt)
            ids = np.concatenate([ids, nxt[:, None]], axis=1)
            done |= nxt == EOS
        out = []
        for row, fin in zip(ids, done):
            if fin:
                row = row[: int(np.argmax(row == EOS)) + 1]
            out.append(row.copy())
        return out

    def info(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "parameters": {p.name: list(p.shape) for p in self.parameters()},
            "parameter_count": self.parameter_count(),
        }
