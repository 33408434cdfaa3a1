"""Dataclass configs for every pipeline stage, plus JSON round-tripping.

All configs are frozen; cross-field consistency (vocab size vs codebook,
context length vs image block length) is validated by ``RunConfig``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError

TEXT_VOCAB_SIZE = 256  # byte-level text tokenizer
NUM_SENTINELS = 5  # BOS, EOS, BOI, EOI, PAD


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


@dataclass(frozen=True)
class VqConfig:
    """Discrete image tokenizer configuration.

    ``codebook_size`` (K) local image-token ids, ``latent_dim`` (D) per grid
    cell, images of ``image_hw`` downsampled by ``downsample`` (f), so the
    token grid is (H/f, W/f) and every image costs H/f * W/f tokens.
    """

    codebook_size: int = 256
    latent_dim: int = 16
    image_hw: tuple[int, int] = (32, 32)
    downsample: int = 4
    channels: tuple[int, ...] = (32, 64)
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_eps: float = 0.05
    learning_rate: float = 0.5
    momentum: float = 0.9
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        h, w = self.image_hw
        f = self.downsample
        _require(self.codebook_size >= 1, "codebook_size must be >= 1")
        _require(self.latent_dim >= 1, "latent_dim must be >= 1")
        _require(h >= 1 and w >= 1, "image_hw must be positive")
        _require(f >= 1 and (f & (f - 1)) == 0, "downsample must be a power of two")
        _require(h % f == 0 and w % f == 0, "image_hw must be divisible by downsample")
        # beta = 0 is allowed so the commitment term can be switched off entirely.
        _require(self.commitment_weight >= 0.0, "commitment_weight must be >= 0")
        _require(0.0 < self.ema_decay <= 1.0, "ema_decay must be in (0, 1]")
        n_down = int(math.log2(f)) if f > 1 else 0
        _require(
            len(self.channels) == n_down,
            f"channels must list one width per stride-2 stage ({n_down} for f={f})",
        )
        _require(self.learning_rate > 0.0, "learning_rate must be > 0")

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.downsample, self.image_hw[1] // self.downsample)

    @property
    def tokens_per_image(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer configuration over the unified vocabulary."""

    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 96
    seed: int = 0

    def __post_init__(self):
        _require(self.vocab_size >= 1, "vocab_size must be >= 1")
        _require(self.d_model >= 1 and self.n_layers >= 1, "model dims must be positive")
        _require(self.d_model % self.n_heads == 0, "d_model must be divisible by n_heads")
        _require(self.max_seq_len >= 2, "max_seq_len must be >= 2")


@dataclass(frozen=True)
class SamplingParams:
    """Sampling knobs plus generation budgets.

    ``temperature``/``top_k``/``top_p`` apply in text mode; the ``image_*``
    variants apply inside image blocks. ``temperature == 0`` means greedy.
    ``max_tokens``/``max_images`` budget generated tokens only (the prompt is
    not counted).
    """

    temperature: float = 0.9
    top_k: int = 0
    top_p: float = 0.95
    image_temperature: float = 1.0
    image_top_k: int = 0
    image_top_p: float = 1.0
    seed: int = 0
    max_tokens: int = 256
    max_images: int = 4

    def __post_init__(self):
        for name, t, k, p in (
            ("", self.temperature, self.top_k, self.top_p),
            ("image_", self.image_temperature, self.image_top_k, self.image_top_p),
        ):
            _require(t >= 0.0, f"{name}temperature must be >= 0")
            _require(k >= 0, f"{name}top_k must be >= 0")
            _require(0.0 < p <= 1.0, f"{name}top_p must be in (0, 1]")
        _require(self.max_tokens >= 1, "max_tokens must be >= 1")
        _require(self.max_images >= 0, "max_images must be >= 0")

    def knobs(self, image_mode: bool) -> tuple[float, int, float]:
        if image_mode:
            return (self.image_temperature, self.image_top_k, self.image_top_p)
        return (self.temperature, self.top_k, self.top_p)


@dataclass(frozen=True)
class PretrainConfig:
    """LM pre-training schedule.

    Image-token targets are down-weighted and (by default) the image-token
    head rows are held at their random init, so the base model's image
    generation capability lives in the trunk but stays unexpressed at the
    output head until the selective fine-tune.
    """

    steps: int = 2500
    batch_size: int = 16
    learning_rate: float = 0.5
    momentum: float = 0.9
    grad_clip: float = 1.0
    image_loss_weight: float = 0.1
    freeze_image_head_rows: bool = True
    seed: int = 0

    def __post_init__(self):
        _require(self.steps >= 0, "steps must be >= 0")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.learning_rate > 0.0, "learning_rate must be > 0")
        _require(0.0 <= self.image_loss_weight, "image_loss_weight must be >= 0")


@dataclass(frozen=True)
class FinetuneConfig:
    """Selective head fine-tune schedule (only image-token rows train).

    The base model's trunk routes image information through the frozen head
    rows, which inflates final-hidden-state norms; the convex head objective
    therefore needs a small learning rate to converge rather than oscillate.
    """

    steps: int = 1500
    batch_size: int = 16
    learning_rate: float = 0.001
    momentum: float = 0.9
    train_sentinel_rows: bool = False
    seed: int = 0

    def __post_init__(self):
        _require(self.steps >= 0, "steps must be >= 0")
        _require(self.batch_size >= 1, "batch_size must be >= 1")
        _require(self.learning_rate > 0.0, "learning_rate must be > 0")


@dataclass(frozen=True)
class RunConfig:
    """All stage configs plus the pipeline seed; checks cross-field consistency."""

    vq: VqConfig = field(default_factory=VqConfig)
    model: ModelConfig | None = None
    sampling: SamplingParams = field(default_factory=SamplingParams)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    vq_steps: int = 1500
    vq_batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.model is None:
            object.__setattr__(self, "model", ModelConfig(vocab_size=self.expected_vocab_size()))
        self.validate()

    def expected_vocab_size(self) -> int:
        return TEXT_VOCAB_SIZE + self.vq.codebook_size + NUM_SENTINELS

    def validate(self) -> None:
        _require(
            self.model.vocab_size == self.expected_vocab_size(),
            f"model vocab_size {self.model.vocab_size} != text+codebook+sentinels "
            f"{self.expected_vocab_size()}",
        )
        n = self.vq.tokens_per_image
        _require(
            self.model.max_seq_len >= n + 4,
            f"max_seq_len {self.model.max_seq_len} too short for one image block (N={n})",
        )


def _dataclass_from_dict(cls, data: dict[str, Any]):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, val in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config field {key!r} for {cls.__name__}")
        ftype = fields[key].type
        if isinstance(val, list):
            val = tuple(val)
        kwargs[key] = val
        del ftype
    return cls(**kwargs)


def run_config_to_dict(cfg: RunConfig) -> dict[str, Any]:
    return dataclasses.asdict(cfg)


def run_config_from_dict(data: dict[str, Any]) -> RunConfig:
    kwargs: dict[str, Any] = {}
    sections = {
        "vq": VqConfig,
        "model": ModelConfig,
        "sampling": SamplingParams,
        "pretrain": PretrainConfig,
        "finetune": FinetuneConfig,
    }
    for key, val in data.items():
        if key in sections:
            kwargs[key] = None if val is None else _dataclass_from_dict(sections[key], val)
        elif key in ("vq_steps", "vq_batch_size", "seed"):
            kwargs[key] = val
        else:
            raise ConfigError(f"unknown RunConfig section {key!r}")
    return RunConfig(**kwargs)


def load_run_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a JSON object")
    return run_config_from_dict(data)
