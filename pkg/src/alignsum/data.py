"""Synthetic paired (text, image, summary) data plus dataset file I/O.

Each example is drawn from a latent recipe of 2-4 "concept" symbols. The
source text mentions every concept surrounded by filler words, the image
paints each concept's fixed pattern into its fixed grid cell over a uniform
background, and the summary lists exactly the concept tokens in canonical
order. The cross-modal mapping is therefore learnable and inspectable.

Dataset directory layout:
    manifest          key=value text
    vocab.txt         one token per line, line number = id
    train.records     TSV: id, source tokens, image path, summary tokens
    dev.records / test.records
    images/<id>.img   raw blob: magic, C/H/W uint32, dtype code, values
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidArgumentError, RecordParseError
from .representation import EOS, SOS, Vocabulary, pad_sequences, TokenSequence

log = logging.getLogger(__name__)

IMAGE_MAGIC = b"AIMG"
_DTYPE_CODES = {4: "<f4", 8: "<f8"}


@dataclass
class DataConfig:
    vocab_size: int = 512
    num_concepts: int = 16
    min_concepts: int = 2
    max_concepts: int = 4
    image_channels: int = 1
    image_size: int = 16
    patch_size: int = 4
    max_text_len: int = 500
    max_summary_len: int = 32
    background: float = 0.5

    def __post_init__(self):
        cells = (self.image_size // self.patch_size) ** 2
        if self.image_size % self.patch_size:
            raise InvalidArgumentError("image size must be divisible by patch size")
        if cells < self.num_concepts:
            raise InvalidArgumentError(
                f"{self.num_concepts} concepts need {self.num_concepts} grid cells, "
                f"image provides {cells}"
            )
        if self.vocab_size < 4 + self.num_concepts + 8:
            raise InvalidArgumentError("vocabulary too small for concepts plus fillers")
        if not 1 <= self.min_concepts <= self.max_concepts <= self.num_concepts:
            raise InvalidArgumentError("bad concept count range")


@dataclass
class PairedExample:
    id: str
    source: list[str]
    image: np.ndarray  # (C, H, W)
    summary: list[str]
    matched: bool = True


@dataclass
class DatasetManifest:
    version: int
    seed: int
    n_train: int
    n_dev: int
    n_test: int
    config: DataConfig = field(default_factory=DataConfig)

    def to_lines(self) -> list[str]:
        rows = {
            "version": self.version,
            "seed": self.seed,
            "n_train": self.n_train,
            "n_dev": self.n_dev,
            "n_test": self.n_test,
        }
        for key, val in vars(self.config).items():
            rows[f"data.{key}"] = val
        return [f"{k}={v}" for k, v in rows.items()]

    @classmethod
    def from_lines(cls, lines) -> "DatasetManifest":
        kv = {}
        for i, line in enumerate(lines, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise RecordParseError("manifest line missing '='", line=i)
            key, val = line.split("=", 1)
            kv[key.strip()] = val.strip()
        cfg_kwargs = {}
        for key, val in kv.items():
            if key.startswith("data."):
                name = key[len("data."):]
                kind = DataConfig.__dataclass_fields__[name].type
                cfg_kwargs[name] = float(val) if kind == "float" else int(val)
        return cls(
            version=int(kv["version"]),
            seed=int(kv["seed"]),
            n_train=int(kv["n_train"]),
            n_dev=int(kv["n_dev"]),
            n_test=int(kv["n_test"]),
            config=DataConfig(**cfg_kwargs),
        )


def concept_tokens(cfg: DataConfig) -> list[str]:
    return [f"obj{i:02d}" for i in range(cfg.num_concepts)]


def filler_tokens(cfg: DataConfig) -> list[str]:
    n = cfg.vocab_size - 4 - cfg.num_concepts
    return [f"w{i:04d}" for i in range(n)]


def build_vocabulary(cfg: DataConfig) -> Vocabulary:
    return Vocabulary.build(concept_tokens(cfg) + filler_tokens(cfg))


def concept_patterns(cfg: DataConfig, seed: int) -> np.ndarray:
    """(num_concepts, C, P, P) pattern stack; distinct and off-background."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    shape = (cfg.num_concepts, cfg.image_channels, cfg.patch_size, cfg.patch_size)
    # keep pattern values away from the uniform background level
    pats = rng.uniform(0.7, 1.0, size=shape)
    return pats


def _render_image(concepts, patterns, cfg: DataConfig) -> np.ndarray:
    c, s, p = cfg.image_channels, cfg.image_size, cfg.patch_size
    grid = s // p
    img = np.full((c, s, s), cfg.background, dtype=np.float64)
    for idx in concepts:
        row, col = divmod(idx, grid)
        img[:, row * p : (row + 1) * p, col * p : (col + 1) * p] = patterns[idx]
    return img


def generate_synthetic(
    seed: int, n_train: int, n_dev: int, n_test: int, cfg: DataConfig | None = None
) -> tuple[dict, DatasetManifest, Vocabulary]:
    """Deterministic splits keyed entirely by (seed, config); regeneration is
    bit-identical. Raises CapacityError when the recipe space is exhausted."""
    cfg = cfg or DataConfig()
    total = n_train + n_dev + n_test
    recipes = []
    for size in range(cfg.min_concepts, cfg.max_concepts + 1):
        recipes.extend(itertools.combinations(range(cfg.num_concepts), size))
    if total > len(recipes):
        raise CapacityError(
            f"{total} examples requested but only {len(recipes)} distinct recipes exist"
        )
    order = np.random.default_rng(np.random.SeedSequence([seed, 2])).permutation(len(recipes))
    patterns = concept_patterns(cfg, seed)
    concepts = concept_tokens(cfg)
    fillers = filler_tokens(cfg)

    examples = []
    for i in range(total):
        recipe = sorted(recipes[order[i]])
        rng = np.random.default_rng(np.random.SeedSequence([seed, 3, i]))
        source: list[str] = [fillers[rng.integers(len(fillers))] for _ in range(int(rng.integers(1, 3)))]
        for idx in rng.permutation(recipe):
            source.append(concepts[idx])
            for _ in range(int(rng.integers(1, 3))):
                source.append(fillers[rng.integers(len(fillers))])
        summary = [concepts[idx] for idx in recipe]
        examples.append(
            PairedExample(
                id=f"ex{i:05d}",
                source=source[: cfg.max_text_len - 2],
                image=_render_image(recipe, patterns, cfg),
                summary=summary,
            )
        )
    splits = {
        "train": examples[:n_train],
        "dev": examples[n_train : n_train + n_dev],
        "test": examples[n_train + n_dev :],
    }
    manifest = DatasetManifest(
        version=1, seed=seed, n_train=n_train, n_dev=n_dev, n_test=n_test, config=cfg
    )
    return splits, manifest, build_vocabulary(cfg)


# --- file I/O ------------------------------------------------------------------


def write_image_blob(path, image: np.ndarray) -> None:
    arr = np.ascontiguousarray(image, dtype="<f8")
    c, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC)
        for dim in (c, h, w):
            fh.write(int(dim).to_bytes(4, "little"))
        fh.write((8).to_bytes(1, "little"))
        fh.write(arr.tobytes())


def read_image_blob(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != IMAGE_MAGIC:
            raise RecordParseError(f"bad image magic in {path}")
        c, h, w = (int.from_bytes(fh.read(4), "little") for _ in range(3))
        code = int.from_bytes(fh.read(1), "little")
        if code not in _DTYPE_CODES:
            raise RecordParseError(f"unknown image precision code {code} in {path}")
        dtype = np.dtype(_DTYPE_CODES[code])
        raw = fh.read()
    expected = c * h * w * dtype.itemsize
    if len(raw) != expected:
        raise RecordParseError(f"image payload truncated in {path}")
    return np.frombuffer(raw, dtype=dtype).reshape(c, h, w).astype(np.float64)


def save_dataset(splits: dict, manifest: DatasetManifest, vocab: Vocabulary, root) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "manifest").write_text("\n".join(manifest.to_lines()) + "\n", encoding="utf-8")
    vocab.save(root / "vocab.txt")
    for split, examples in splits.items():
        lines = []
        for ex in examples:
            img_rel = f"images/{ex.id}.img"
            write_image_blob(root / img_rel, ex.image)
            lines.append("\t".join([ex.id, " ".join(ex.source), img_rel, " ".join(ex.summary)]))
        (root / f"{split}.records").write_text("\n".join(lines) + ("\n" if lines else ""),
                                               encoding="utf-8")


def load_dataset(root) -> tuple[dict, DatasetManifest, Vocabulary]:
    """Read a dataset directory back; source texts over the manifest's cap are
    truncated here, with the count logged."""
    root = Path(root)
    manifest = DatasetManifest.from_lines(
        (root / "manifest").read_text(encoding="utf-8").splitlines()
    )
    vocab = Vocabulary.load(root / "vocab.txt")
    cap = manifest.config.max_text_len - 2  # room for <sos> and <eos>
    truncated = 0
    splits = {}
    for split in ("train", "dev", "test"):
        path = root / f"{split}.records"
        examples = []
        if not path.exists():
            splits[split] = examples
            continue
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise RecordParseError(
                    f"expected 4 tab-separated fields, got {len(parts)}", line=lineno
                )
            ex_id, source_text, img_rel, summary_text = parts
            img_path = root / img_rel
            if not img_path.exists():
                raise RecordParseError(
                    f"missing image payload {img_rel}", line=lineno, record_id=ex_id
                )
            source = source_text.split()
            if len(source) > cap:
                source = source[:cap]
                truncated += 1
            examples.append(
                PairedExample(
                    id=ex_id,
                    source=source,
                    image=read_image_blob(img_path),
                    summary=summary_text.split(),
                )
            )
        splits[split] = examples
    if truncated:
        log.info("truncated %d source texts at the %d-token cap", truncated, cap)
    return splits, manifest, vocab


# --- batching -------------------------------------------------------------------


@dataclass
class Batch:
    ids: list[str]
    text_ids: np.ndarray
    text_mask: np.ndarray
    images: np.ndarray
    summary_ids: np.ndarray
    summary_mask: np.ndarray

    @property
    def size(self) -> int:
        return len(self.ids)


def encode_tokens(tokens: list[str], vocab: Vocabulary, cap: int) -> TokenSequence:
    ids = [SOS] + [vocab.id_of(t) for t in tokens] + [EOS]
    if len(ids) > cap:
        ids = ids[: cap - 1] + [EOS]
    return TokenSequence(np.array(ids, dtype=np.int64), np.ones(len(ids), dtype=bool))


def batch_iterator(
    examples: list[PairedExample],
    batch_size: int,
    seed: int,
    vocab: Vocabulary,
    max_text_len: int = 500,
    max_summary_len: int = 32,
    shuffle: bool = True,
):
    """Yield padded batches; epoch-level order is a seeded permutation, the
    final partial batch is kept."""
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be >= 1")
    if not examples:
        raise InvalidArgumentError("empty split")
    order = np.arange(len(examples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[start : start + batch_size]]
        text_seqs = [encode_tokens(ex.source, vocab, max_text_len) for ex in chunk]
        summ_seqs = [encode_tokens(ex.summary, vocab, max_summary_len) for ex in chunk]
        text_ids, text_mask = pad_sequences(text_seqs)
        summ_ids, summ_mask = pad_sequences(summ_seqs)
        yield Batch(
            ids=[ex.id for ex in chunk],
            text_ids=text_ids,
            text_mask=text_mask,
            images=np.stack([ex.image for ex in chunk]),
            summary_ids=summ_ids,
            summary_mask=summ_mask,
        )


def cyclic_mismatch(examples: list[PairedExample]) -> list[PairedExample]:
    """Pair each example with its neighbour's image (deterministic negatives)."""
    n = len(examples)
    out = []
    for i, ex in enumerate(examples):
        out.append(
            PairedExample(
                id=f"{ex.id}-mm",
                source=ex.source,
                image=examples[(i + 1) % n].image,
                summary=ex.summary,
                matched=False,
            )
        )
    return out
