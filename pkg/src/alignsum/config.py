"""Flat key=value run configuration with dotted namespaces.

One schema drives file parsing, `--override key=value` flags, and the
effective-config echo. All randomness flows from the single `seed` key;
modules derive their own streams by stable hashing (see training.derive_seed).
"""

from __future__ import annotations

from .data import DataConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

# key -> (type, default)
SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 1234),
    "precision": (str, "float32"),
    "model.width": (int, 64),
    "model.alignment_layers": (int, 2),
    "model.decoder_layers": (int, 2),
    "model.decoder_heads": (int, 4),
    "model.decoder_ff": (int, 256),
    "model.dropout": (float, 0.3),
    "model.similarity_shift": (float, -0.15),
    "model.attention_sharpness": (float, 6.0),
    "model.contrastive_temperature": (float, 0.1),
    "model.patch_size": (int, 4),
    "model.max_text_len": (int, 500),
    "model.max_summary_len": (int, 32),
    "model.pooling": (str, "mean"),
    "model.relu_in_denominator": (bool, False),
    "model.self_attention_in_alignment": (bool, False),
    "model.share_gates": (bool, False),
    "model.tie_output": (bool, False),
    "model.image_positional": (bool, False),
    "train.epochs": (int, 300),
    "train.batch_size": (int, 16),
    "train.lr": (float, 1e-3),
    "train.weight_decay": (float, 1e-4),
    "train.clip_norm": (float, 1.0),
    "train.eval_every": (int, 10),
    "losses.beta1": (str, "increase"),
    "losses.beta2": (str, "increase"),
    "losses.disable_i2t": (bool, False),
    "losses.disable_t2i": (bool, False),
    "data.dir": (str, "dataset"),
    "data.n_train": (int, 32),
    "data.n_dev": (int, 8),
    "data.n_test": (int, 8),
    "data.vocab_size": (int, 512),
    "data.num_concepts": (int, 16),
    "data.min_concepts": (int, 2),
    "data.max_concepts": (int, 4),
    "data.image_channels": (int, 1),
    "data.image_size": (int, 16),
    "data.background": (float, 0.5),
}


def _parse_value(key: str, raw: str):
    kind, _ = SCHEMA[key]
    raw = raw.strip()
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc


def defaults() -> dict:
    return {k: v for k, (_, v) in SCHEMA.items()}


def parse_config_text(text: str) -> dict:
    """Parse `key = value` lines (# comments allowed) against the schema."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_config(path=None, overrides=()) -> dict:
    """Defaults, then the file, then overrides — later entries win."""
    cfg = defaults()
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cfg.update(parse_config_text(fh.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, raw = item.split("=", 1)
        key = key.strip()
        if key not in SCHEMA:
            raise ConfigError(f"unknown override key {key!r}")
        cfg[key] = _parse_value(key, raw)
    return cfg


def render_config(cfg: dict) -> str:
    return "\n".join(f"{k}={cfg[k]}" for k in sorted(cfg)) + "\n"


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size,
        width=cfg["model.width"],
        alignment_layers=cfg["model.alignment_layers"],
        decoder_layers=cfg["model.decoder_layers"],
        decoder_heads=cfg["model.decoder_heads"],
        decoder_ff=cfg["model.decoder_ff"],
        dropout=cfg["model.dropout"],
        similarity_shift=cfg["model.similarity_shift"],
        attention_sharpness=cfg["model.attention_sharpness"],
        contrastive_temperature=cfg["model.contrastive_temperature"],
        patch_size=cfg["model.patch_size"],
        image_channels=cfg["data.image_channels"],
        max_text_len=cfg["model.max_text_len"],
        max_summary_len=cfg["model.max_summary_len"],
        pooling=cfg["model.pooling"],
        relu_in_denominator=cfg["model.relu_in_denominator"],
        self_attention_in_alignment=cfg["model.self_attention_in_alignment"],
        share_gates=cfg["model.share_gates"],
        tie_output=cfg["model.tie_output"],
        image_positional=cfg["model.image_positional"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        epochs=cfg["train.epochs"],
        batch_size=cfg["train.batch_size"],
        lr=cfg["train.lr"],
        weight_decay=cfg["train.weight_decay"],
        clip_norm=cfg["train.clip_norm"],
        eval_every=cfg["train.eval_every"],
        beta1_kind=cfg["losses.beta1"],
        beta2_kind=cfg["losses.beta2"],
        disable_i2t=cfg["losses.disable_i2t"],
        disable_t2i=cfg["losses.disable_t2i"],
        seed=cfg["seed"],
        precision=cfg["precision"],
    )


def data_config(cfg: dict) -> DataConfig:
    return DataConfig(
        vocab_size=cfg["data.vocab_size"],
        num_concepts=cfg["data.num_concepts"],
        min_concepts=cfg["data.min_concepts"],
        max_concepts=cfg["data.max_concepts"],
        image_channels=cfg["data.image_channels"],
        image_size=cfg["data.image_size"],
        patch_size=cfg["model.patch_size"],
        max_text_len=cfg["model.max_text_len"],
        max_summary_len=cfg["model.max_summary_len"],
        background=cfg["data.background"],
    )
