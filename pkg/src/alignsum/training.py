"""Optimization loop: batching, objective assembly, LR halving on dev
regressions, structured step logging, checkpoint/resume."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import record
from .checkpoint import load_checkpoint, load_values, save_checkpoint
from .data import Batch, PairedExample, batch_iterator, cyclic_mismatch
from .errors import InvalidArgumentError, NumericDomainError
from .evaluation import normalize_tokens, rouge_n
from .losses import (
    LossBreakdown,
    WeightSchedule,
    layered_info_nce,
    sequence_nll,
    total_loss,
)
from .model import Summarizer
from .optim import AdamOptimizer, lr_schedule_step
from .representation import Vocabulary

log = logging.getLogger(__name__)

STEP_LOG_HEADER = ("epoch", "step", "gene", "i2t", "t2i", "beta1", "beta2", "reg", "total")


def derive_seed(seed: int, name: str) -> int:
    """Per-module seed: stable hash of the master seed and a label."""
    digest = hashlib.sha256(f"{seed}:{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


@dataclass
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    eval_every: int = 10
    beta1_kind: str = "increase"
    beta2_kind: str = "increase"
    disable_i2t: bool = False
    disable_t2i: bool = False
    seed: int = 1234
    precision: str = "float32"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidArgumentError("epochs and batch_size must be >= 1")
        if self.eval_every < 1:
            raise InvalidArgumentError("eval_every must be >= 1")


def train_step(
    model: Summarizer,
    optimizer: AdamOptimizer,
    batch: Batch,
    beta1: float,
    beta2: float,
    weight_decay: float,
    clip_norm: float,
    rng: np.random.Generator | None,
    compute_i2t: bool = True,
    compute_t2i: bool = True,
) -> LossBreakdown:
    """One forward/backward/update over a padded batch."""
    cfg = model.config
    optimizer.zero_grad()
    try:
        with record() as tape:
            text = model.embed_text_batch(batch.text_ids, batch.text_mask, rng)
            image = model.embed_image_batch(batch.images, rng)
            enc = model.encode(text, image)
            i2t = t2i = None
            if compute_i2t:
                i2t = layered_info_nce(
                    enc.image_aligned, enc.text_original, cfg.contrastive_temperature, cfg.pooling
                )
            if compute_t2i:
                t2i = layered_info_nce(
                    enc.text_aligned, enc.image_original, cfg.contrastive_temperature, cfg.pooling
                )
            logits = model.decode_train(
                enc, batch.summary_ids[:, :-1], batch.summary_mask[:, :-1], rng
            )
            gene = sequence_nll(logits, batch.summary_ids[:, 1:], batch.summary_mask[:, 1:])
            total, breakdown = total_loss(
                gene, i2t, t2i, beta1, beta2, batch.size,
                params=model.parameters(), weight_decay=weight_decay,
            )
        tape.backward(total)
    except NumericDomainError as exc:
        raise NumericDomainError(
            f"non-finite loss on batch [{', '.join(batch.ids)}]: {exc}"
        ) from exc
    optimizer.clip_gradients(clip_norm)
    optimizer.step()
    return breakdown


def greedy_summaries(
    model: Summarizer, examples: list[PairedExample], vocab: Vocabulary,
    batch_size: int = 16,
) -> list[list[str]]:
    """Deterministic greedy generations, order-preserving, dropout off."""
    out: list[list[str]] = []
    for batch in batch_iterator(
        examples, batch_size, seed=0, vocab=vocab,
        max_text_len=model.config.max_text_len,
        max_summary_len=model.config.max_summary_len,
        shuffle=False,
    ):
        text = model.embed_text_batch(batch.text_ids, batch.text_mask)
        image = model.embed_image_batch(batch.images)
        enc = model.encode(text, image)
        for row in model.generate(enc, model.config.max_summary_len):
            out.append([vocab.token_of(int(i)) for i in row])
    return out


def dev_rouge1(model: Summarizer, examples: list[PairedExample], vocab: Vocabulary) -> float:
    """Mean ROUGE-1 F1 of greedy generations against the target summaries."""
    hyps = greedy_summaries(model, examples, vocab)
    scores = []
    for hyp, ex in zip(hyps, examples):
        scores.append(rouge_n(normalize_tokens(hyp), normalize_tokens(ex.summary), 1).f1)
    return float(np.mean(scores))


def mean_token_nll(model: Summarizer, examples: list[PairedExample], vocab: Vocabulary,
                   batch_size: int = 16) -> float:
    """Per-token reconstruction NLL with dropout off."""
    total = 0.0
    tokens = 0
    for batch in batch_iterator(
        examples, batch_size, seed=0, vocab=vocab,
        max_text_len=model.config.max_text_len,
        max_summary_len=model.config.max_summary_len,
        shuffle=False,
    ):
        text = model.embed_text_batch(batch.text_ids, batch.text_mask)
        image = model.embed_image_batch(batch.images)
        enc = model.encode(text, image)
        logits = model.decode_train(enc, batch.summary_ids[:, :-1], batch.summary_mask[:, :-1])
        nll = sequence_nll(logits, batch.summary_ids[:, 1:], batch.summary_mask[:, 1:])
        total += nll.item()
        tokens += int(batch.summary_mask[:, 1:].sum())
    return total / tokens


def alignment_margin(
    model: Summarizer, examples: list[PairedExample], vocab: Vocabulary,
) -> tuple[float, float]:
    """(matched, mismatched) mean cosine between the pooled final text-side
    aligned features and the pooled raw image embedding."""

    def mean_cosine(pairs: list[PairedExample]) -> float:
        vals = []
        for batch in batch_iterator(
            pairs, 16, seed=0, vocab=vocab,
            max_text_len=model.config.max_text_len,
            max_summary_len=model.config.max_summary_len,
            shuffle=False,
        ):
            text = model.embed_text_batch(batch.text_ids, batch.text_mask)
            image = model.embed_image_batch(batch.images)
            enc = model.encode(text, image)
            final = enc.text_aligned[-1]
            feats = final.features.data
            tmask = final.mask
            img = enc.image_original.features.data
            for b in range(batch.size):
                a = feats[b][tmask[b]].mean(axis=0)
                p = img[b].mean(axis=0)
                vals.append(
                    float(a @ p / (np.linalg.norm(a) * np.linalg.norm(p)))
                )
        return float(np.mean(vals))

    return mean_cosine(examples), mean_cosine(cyclic_mismatch(examples))


@dataclass
class TrainResult:
    final_checkpoint: Path
    step_rows: list[list]
    dev_history: list[tuple[int, float, float]]  # (epoch, dev score, lr after)
    final_dev_score: float


def _format_row(values) -> str:
    out = []
    for v in values:
        out.append(f"{v:.10g}" if isinstance(v, float) else str(v))
    return "\t".join(out)


def train(
    model: Summarizer,
    splits: dict,
    vocab: Vocabulary,
    cfg: TrainConfig,
    out_dir,
    resume_from=None,
) -> TrainResult:
    """Run the full loop; artifacts land in out_dir (train_log.tsv, checkpoints)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_split = splits["train"]
    dev_split = splits.get("dev") or train_split
    if not train_split:
        raise InvalidArgumentError("empty training split")
    if str(model.token_table.dtype) != cfg.precision:
        raise InvalidArgumentError(
            f"model built at {model.token_table.dtype} but config asks for {cfg.precision}"
        )

    optimizer = AdamOptimizer(model.parameters(), lr=cfg.lr)
    start_epoch = 0
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from)
        load_values(model, ckpt.params)
        optimizer = AdamOptimizer(model.parameters(), lr=cfg.lr)
        optimizer.load_state(ckpt.optimizer, ckpt.moments_m, ckpt.moments_v)
        start_epoch = ckpt.epoch
        log.info("resumed from %s at epoch %d", resume_from, start_epoch)

    sched1 = WeightSchedule(cfg.beta1_kind, cfg.epochs, seed=derive_seed(cfg.seed, "beta1"))
    sched2 = WeightSchedule(cfg.beta2_kind, cfg.epochs, seed=derive_seed(cfg.seed, "beta2"))

    step_rows: list[list] = []
    dev_history: list[tuple[int, float, float]] = []
    log_path = out_dir / "train_log.tsv"
    mode = "a" if (resume_from is not None and log_path.exists()) else "w"
    log_file = open(log_path, mode, encoding="utf-8")
    if mode == "w":
        log_file.write("\t".join(STEP_LOG_HEADER) + "\n")

    ckpt_path = out_dir / "latest.ckpt"
    step = optimizer.step_count
    dev_score = 0.0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            beta1 = 0.0 if cfg.disable_i2t else sched1.value(epoch)
            beta2 = 0.0 if cfg.disable_t2i else sched2.value(epoch)
            drop_rng = np.random.default_rng(derive_seed(cfg.seed, f"dropout:{epoch}"))
            shuffle_seed = derive_seed(cfg.seed, f"shuffle:{epoch}")
            for batch in batch_iterator(
                train_split, cfg.batch_size, shuffle_seed, vocab,
                max_text_len=model.config.max_text_len,
                max_summary_len=model.config.max_summary_len,
            ):
                breakdown = train_step(
                    model, optimizer, batch, beta1, beta2,
                    cfg.weight_decay, cfg.clip_norm,
                    drop_rng if model.config.dropout > 0 else None,
                    compute_i2t=not cfg.disable_i2t,
                    compute_t2i=not cfg.disable_t2i,
                )
                step += 1
                row = [epoch, step, *breakdown.row()]
                step_rows.append(row)
                log_file.write(_format_row(row) + "\n")
            if (epoch + 1) % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
                dev_score = dev_rouge1(model, dev_split, vocab)
                lr_schedule_step(optimizer, dev_score)
                dev_history.append((epoch, dev_score, optimizer.lr))
                log.info("epoch %d dev rouge1 %.4f lr %.3g", epoch, dev_score, optimizer.lr)
                save_checkpoint(ckpt_path, model, optimizer, epoch=epoch + 1, seed=cfg.seed)
        save_checkpoint(ckpt_path, model, optimizer, epoch=cfg.epochs, seed=cfg.seed)
    finally:
        log_file.close()
    return TrainResult(
        final_checkpoint=ckpt_path,
        step_rows=step_rows,
        dev_history=dev_history,
        final_dev_score=dev_score,
    )
