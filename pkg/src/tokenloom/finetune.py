"""Selective fine-tuning: train only the output-head rows for image tokens.

Everything else is frozen exactly: updates are applied by row filtering at
update time, and optimizer momentum exists only for the trainable rows, so
frozen tensors are never written at all.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

from . import model
from .config import FinetuneConfig, ModelConfig
from .errors import ConfigError, DivergenceError, ShapeError
from .vocab import VocabLayout


@dataclass(frozen=True)
class TrainableMask:
    """Boolean row mask over the output head; all other tensors are frozen."""

    head_rows: np.ndarray  # (V_total,) bool

    def __post_init__(self):
        if self.head_rows.dtype != np.bool_ or self.head_rows.ndim != 1:
            raise ShapeError("head_rows must be a 1-D boolean vector")

    @property
    def row_indices(self) -> np.ndarray:
        return np.flatnonzero(self.head_rows)

    @property
    def count(self) -> int:
        return int(self.head_rows.sum())


class TrainableCount(NamedTuple):
    weights: int
    biases: int

    @property
    def total(self) -> int:
        return self.weights + self.biases


def build_mask(layout: VocabLayout, train_sentinel_rows: bool = False) -> TrainableMask:
    """True exactly for image-token ids (optionally also BOI/EOI)."""
    rows = np.zeros(layout.total, dtype=bool)
    rows[layout.image_start : layout.image_end] = True
    if train_sentinel_rows:
        rows[layout.boi] = True
        rows[layout.eoi] = True
    return TrainableMask(head_rows=rows)


def count_trainable(
    layout: VocabLayout, cfg: ModelConfig, train_sentinel_rows: bool = False
) -> TrainableCount:
    """Trainable parameters of the selective fine-tune: rows * d_model weights
    plus one bias entry per row."""
    rows = build_mask(layout, train_sentinel_rows).count
    return TrainableCount(weights=rows * cfg.d_model, biases=rows)


class MaskedHeadOptimizer:
    """Momentum SGD over just the trainable head rows.

    Velocity buffers cover only the masked rows, so frozen rows have no
    optimizer state to create or advance.
    """

    def __init__(self, mask: TrainableMask, momentum: float = 0.9):
        self.mask = mask
        self.momentum = momentum
        self.rows = mask.row_indices
        self.vel_w: np.ndarray | None = None
        self.vel_b: np.ndarray | None = None

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        gw = grads["lm.head.weight"][self.rows]
        gb = grads["lm.head.bias"][self.rows]
        if self.momentum != 0.0:
            if self.vel_w is None:
                self.vel_w = np.zeros_like(gw)
                self.vel_b = np.zeros_like(gb)
            self.vel_w = self.momentum * self.vel_w + gw
            self.vel_b = self.momentum * self.vel_b + gb
            gw, gb = self.vel_w, self.vel_b
        params["lm.head.weight"][self.rows] -= np.float32(lr) * gw
        params["lm.head.bias"][self.rows] -= np.float32(lr) * gb


def finetune_step(
    params: dict[str, np.ndarray],
    tokens: np.ndarray,
    target_weights: np.ndarray,
    mask: TrainableMask,
    opt: MaskedHeadOptimizer,
    cfg: ModelConfig,
    lr: float,
    step_index: int = 0,
) -> float:
    """Full forward/backward, then update only the masked head rows."""
    if mask.head_rows.shape[0] != cfg.vocab_size:
        raise ConfigError(
            f"mask covers {mask.head_rows.shape[0]} rows but vocab has {cfg.vocab_size}"
        )
    value, grads = model.lm_loss_and_grads(params, tokens, target_weights, cfg)
    if not np.isfinite(value):
        raise DivergenceError("fine-tune loss is non-finite", step=step_index, learning_rate=lr)
    opt.step(params, grads, lr)
    return value


@dataclass
class FinetuneReport:
    trainable: TrainableCount
    steps: int
    final_loss: float
    frozen_drift: dict[str, float] = field(default_factory=dict)

    @property
    def max_drift(self) -> float:
        return max(self.frozen_drift.values(), default=0.0)

    def to_text(self) -> str:
        lines = [
            f"trainable_weight_params: {self.trainable.weights}",
            f"trainable_bias_params: {self.trainable.biases}",
            f"trainable_params_total: {self.trainable.total}",
            f"steps: {self.steps}",
            f"final_loss: {self.final_loss:.6f}",
            f"max_frozen_drift: {self.max_drift:.17g}",
        ]
        for name in sorted(self.frozen_drift):
            lines.append(f"frozen_drift[{name}]: {self.frozen_drift[name]:.17g}")
        return "\n".join(lines) + "\n"


def frozen_drift(
    before: dict[str, np.ndarray],
    after: dict[str, np.ndarray],
    mask: TrainableMask,
) -> dict[str, float]:
    """Max-abs change of every frozen tensor / frozen head row. Must be 0.0."""
    drift: dict[str, float] = {}
    frozen_rows = ~mask.head_rows
    for name in sorted(before):
        if name == "lm.head.weight":
            delta = after[name][frozen_rows] - before[name][frozen_rows]
        elif name == "lm.head.bias":
            delta = after[name][frozen_rows] - before[name][frozen_rows]
        else:
            delta = after[name] - before[name]
        drift[name] = float(np.abs(delta).max()) if delta.size else 0.0
    return drift


def finetune_run(
    params: dict[str, np.ndarray],
    batches: Iterable,
    layout: VocabLayout,
    mcfg: ModelConfig,
    ftcfg: FinetuneConfig,
    log_every: int = 0,
) -> FinetuneReport:
    """Run the full selective fine-tune recipe over pre-built batches.

    ``batches`` yields objects with ``tokens`` and ``weights()`` (see
    data.Batch); it is cycled until ``ftcfg.steps`` updates have run. Params
    are updated in place; the report carries the frozen-drift proof.
    """
    mask = build_mask(layout, ftcfg.train_sentinel_rows)
    opt = MaskedHeadOptimizer(mask, momentum=ftcfg.momentum)
    snapshot = {k: v.copy() for k, v in params.items()}

    batch_list = list(batches)
    final_loss = float("nan")
    steps_run = 0
    for step in range(ftcfg.steps):
        if not batch_list:
            break
        batch = batch_list[step % len(batch_list)]
        final_loss = finetune_step(
            params, batch.tokens, batch.weights(), mask, opt, mcfg, ftcfg.learning_rate, step
        )
        steps_run += 1
        if log_every and (step + 1) % log_every == 0:
            print(f"finetune step {step + 1}/{ftcfg.steps} loss {final_loss:.4f}")

    return FinetuneReport(
        trainable=count_trainable(layout, mcfg, ftcfg.train_sentinel_rows),
        steps=steps_run,
        final_loss=final_loss,
        frozen_drift=frozen_drift(snapshot, params, mask),
    )
