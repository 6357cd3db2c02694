"""Configuration records for the model, the trainer, the data generators and a full run.

A run config is a JSON document with one object per section (``model``,
``text_pretrain``, ``stage1``, ``stage2``, ``finetune``, ``data``) plus a few top-level keys.
Unknown keys anywhere are rejected so that typos fail loudly.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


TOKEN_ORDERS = ("visual_first", "text_first")
STAGES = ("text_pretrain", "stage1", "stage2", "finetune")
FUSION_METHODS = ("interleaved", "score_fusion", "pseudo_token")


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_text_layers: int = 2
    n_vit_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 128
    vocab_size: int = 512
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    token_order: str = "visual_first"
    mask_ratio: float = 0.0
    seed: int = 0
    max_text_len: int = 64
    use_projector: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        for name in ("d_model", "n_text_layers", "n_vit_layers", "n_heads", "max_seq_len",
                     "vocab_size", "image_size", "patch_size", "channels", "max_text_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigError("n_heads must divide d_model")
        if self.image_size % self.patch_size:
            raise ConfigError("patch_size must divide image_size")
        if self.token_order not in TOKEN_ORDERS:
            raise ConfigError(f"token_order must be one of {TOKEN_ORDERS}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1)")
        if 1 + self.n_patches + self.max_text_len > self.max_seq_len:
            raise ConfigError("max_seq_len must admit 1 + n_patches + max_text_len tokens")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must leave room for the special tokens")

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    def kept_count(self, mask_ratio: float) -> int:
        if mask_ratio <= 0:
            return self.n_patches
        return math.ceil((1.0 - mask_ratio) * self.n_patches)


@dataclass(frozen=True)
class TrainConfig:
    tau: float = 0.02
    lr_init: float = 2e-5
    total_steps: int = 600
    schedule: str = "linear_decay"
    batch_size: int = 16
    mask_ratio_stage1: float = 0.5
    # None -> 30% of total_steps (stage 1 only)
    unmasked_steps: int | None = None
    hard_negatives_per_query: int = 3
    stage: str = "stage2"
    seed: int = 0
    tasks: tuple[str, ...] = ("it2i", "t2it")
    loss_form: str = "log"
    bidirectional: bool = False
    # how image_text items are embedded during stage 2: one interleaved
    # sequence, or the renormalised sum of separate text and image embeddings
    composition: str = "interleaved"
    grad_clip: float = 1.0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if not self.lr_init > 0:
            raise ConfigError("lr_init must be positive")
        if self.total_steps <= 0:
            raise ConfigError("total_steps must be positive")
        if self.schedule != "linear_decay":
            raise ConfigError("schedule must be 'linear_decay'")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.mask_ratio_stage1 < 1.0:
            raise ConfigError("mask_ratio_stage1 must lie in [0, 1)")
        if self.unmasked_steps is not None and not 0 <= self.unmasked_steps <= self.total_steps:
            raise ConfigError("unmasked_steps must lie in [0, total_steps]")
        if self.hard_negatives_per_query < 0:
            raise ConfigError("hard_negatives_per_query must be non-negative")
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}")
        if self.loss_form not in ("log", "negative_probability"):
            raise ConfigError("loss_form must be 'log' or 'negative_probability'")
        if self.composition not in ("interleaved", "score_fusion"):
            raise ConfigError("composition must be 'interleaved' or 'score_fusion'")
        bad = [t for t in self.tasks if t not in ("it2i", "t2it")]
        if bad or not self.tasks:
            raise ConfigError(f"tasks must be a non-empty subset of it2i/t2it, got {self.tasks}")

    @property
    def masked_steps(self) -> int:
        """Number of leading stage-1 steps that run with patch masking."""
        unmasked = self.unmasked_steps
        if unmasked is None:
            unmasked = int(round(0.3 * self.total_steps))
        return self.total_steps - unmasked


PALETTE = ("red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple")
BACKGROUNDS = ("white", "black", "gray")


@dataclass(frozen=True)
class DataConfig:
    it2i_groups: int = 2000
    edits_per_group: int = 3
    # extra corpus-only edits per source (look-alike candidates, also hard negatives)
    distractors_per_group: int = 3
    t2it_records: int = 2000
    stage1_pairs: int = 4000
    splits: tuple[float, float, float] = (0.90, 0.05, 0.05)
    filter_drop_fraction: float = 0.10
    palette: tuple[str, ...] = PALETTE
    backgrounds: tuple[str, ...] = BACKGROUNDS
    max_objects: int = 4

    def __post_init__(self):
        unknown = [c for c in self.palette if c not in PALETTE]
        if unknown:
            raise ConfigError(f"unknown palette key: {unknown[0]}")
        unknown = [c for c in self.backgrounds if c not in BACKGROUNDS]
        if unknown:
            raise ConfigError(f"unknown background key: {unknown[0]}")
        if len(self.palette) < 2:
            raise ConfigError("palette needs at least two colors")
        if self.edits_per_group < 2:
            raise ConfigError("edits_per_group must be >= 2")
        if self.distractors_per_group < 0:
            raise ConfigError("distractors_per_group must be >= 0")
        if abs(sum(self.splits) - 1.0) > 1e-9 or len(self.splits) != 3:
            raise ConfigError("splits must be three fractions summing to 1")
        if not 0.0 <= self.filter_drop_fraction < 1.0:
            raise ConfigError("filter_drop_fraction must lie in [0, 1)")
        if not 1 <= self.max_objects <= 4:
            raise ConfigError("max_objects must lie in [1, 4]")


def _stage_defaults(stage: str) -> TrainConfig:
    # desk-scale learning rates: 2e-5 barely moves a randomly initialised d=64 model
    if stage == "text_pretrain":
        return TrainConfig(stage="text_pretrain", total_steps=600, batch_size=32,
                           hard_negatives_per_query=0, lr_init=1e-3)
    if stage == "stage1":
        return TrainConfig(stage="stage1", total_steps=1000, batch_size=32,
                           hard_negatives_per_query=0, lr_init=1e-3)
    if stage == "finetune":
        return TrainConfig(stage="finetune", hard_negatives_per_query=9)
    return TrainConfig(stage="stage2", lr_init=5e-4)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    text_pretrain: TrainConfig = field(default_factory=lambda: _stage_defaults("text_pretrain"))
    stage1: TrainConfig = field(default_factory=lambda: _stage_defaults("stage1"))
    stage2: TrainConfig = field(default_factory=lambda: _stage_defaults("stage2"))
    finetune: TrainConfig = field(default_factory=lambda: _stage_defaults("finetune"))
    data: DataConfig = field(default_factory=DataConfig)
    data_dir: str = "data"
    out_dir: str = "runs"
    fusion: str = "interleaved"
    seed: int = 0
    # pseudo-token baseline: steps and depth of the image -> token map
    pseudo_map_steps: int = 200
    pseudo_map_depth: int = 1

    def __post_init__(self):
        if self.pseudo_map_depth < 1:
            raise ConfigError("pseudo_map_depth must be >= 1")
        if self.pseudo_map_steps < 0:
            raise ConfigError("pseudo_map_steps must be non-negative")
        if self.fusion not in FUSION_METHODS:
            raise ConfigError(f"fusion must be one of {FUSION_METHODS}")

    def train_config(self, stage: str) -> TrainConfig:
        return {"text_pretrain": self.text_pretrain, "stage1": self.stage1,
                "stage2": self.stage2, "finetune": self.finetune}[stage]

    def to_dict(self) -> dict[str, Any]:
        return _to_jsonable(dataclasses.asdict(self))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(
            self, seed=seed,
            model=dataclasses.replace(self.model, seed=seed),
            text_pretrain=dataclasses.replace(self.text_pretrain, seed=seed),
            stage1=dataclasses.replace(self.stage1, seed=seed),
            stage2=dataclasses.replace(self.stage2, seed=seed),
            finetune=dataclasses.replace(self.finetune, seed=seed),
        )


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    return obj


def _build(cls, values: dict[str, Any], section: str, base=None):
    if not isinstance(values, dict):
        raise ConfigError(f"section '{section}' must be an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown config key: {section + '.' if section else ''}{key}")
    kwargs = {}
    for key, value in values.items():
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def run_config_from_dict(values: dict[str, Any]) -> RunConfig:
    values = dict(values)
    sections = {
        "model": ModelConfig,
        "text_pretrain": TrainConfig,
        "stage1": TrainConfig,
        "stage2": TrainConfig,
        "finetune": TrainConfig,
        "data": DataConfig,
    }
    kwargs: dict[str, Any] = {}
    for name, cls in sections.items():
        if name in values:
            base = _stage_defaults(name) if cls is TrainConfig else None
            kwargs[name] = _build(cls, values.pop(name), name, base=base)
    cfg = _build(RunConfig, values, "")
    return dataclasses.replace(cfg, **kwargs)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    try:
        values = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return run_config_from_dict(values)
