"""Trainable discrete image tokenizer.

Images (H, W, 3) in [0, 1] are encoded by a small strided conv net to a
latent grid (H/f, W/f, D), snapped to the nearest codebook entry (squared
Euclidean, lowest-index tie-break), and decoded back by a mirrored
transposed-conv net. Training uses the straight-through estimator for the
reconstruction term, a commitment penalty toward the assigned entries, and
EMA codebook updates with dead-code reseeding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .config import VqConfig
from .errors import DivergenceError, NumericError, ShapeError, TokenRangeError

PSNR_CAP_DB = 99.0


@dataclass
class Codebook:
    """K x D embedding table plus the EMA accumulators that maintain it.

    Invariant: entries == ema_sums / ema_counts (up to float division).
    """

    entries: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]

    @classmethod
    def initial(cls, k: int, d: int, rng: np.random.Generator, scale: float = 0.5) -> "Codebook":
        entries = (rng.standard_normal((k, d)) * scale).astype(np.float32)
        return cls(entries=entries, ema_counts=np.ones(k, dtype=np.float32), ema_sums=entries.copy())


@dataclass(frozen=True)
class VqLoss:
    reconstruction: float
    commitment: float  # already weighted by the commitment coefficient
    code_usage: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.commitment


def nearest_codes(flat_latents: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Nearest-neighbor ids for (M, D) latents against (K, D) entries.

    Distances are evaluated in float64 regardless of input dtype so the
    result matches an exact brute-force search; ties go to the lowest index
    (argmin returns the first minimum).
    """
    z = flat_latents.astype(np.float64, copy=False)
    e = entries.astype(np.float64, copy=False)
    d2 = (z * z).sum(axis=1, keepdims=True) - 2.0 * (z @ e.T) + (e * e).sum(axis=1)
    return np.argmin(d2, axis=1)


def quantize(latent: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Snap a latent grid (Hg, Wg, D) to codebook ids (Hg, Wg)."""
    if latent.ndim != 3 or latent.shape[2] != codebook.dim:
        raise ShapeError(
            f"latent shape {latent.shape} does not match codebook dim {codebook.dim}"
        )
    if not np.isfinite(latent).all():
        raise NumericError("latent grid contains non-finite values")
    gh, gw, d = latent.shape
    ids = nearest_codes(latent.reshape(-1, d), codebook.entries)
    return ids.reshape(gh, gw)


def embed(ids: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Codebook lookup: ids (...,) -> latents (..., D)."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= codebook.size):
        bad = int(ids.min()) if ids.min() < 0 else int(ids.max())
        raise TokenRangeError(f"image token id {bad} outside [0, {codebook.size})")
    return codebook.entries[ids]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99 dB."""
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP_DB)


def _n_down(cfg: VqConfig) -> int:
    return int(math.log2(cfg.downsample)) if cfg.downsample > 1 else 0


def init_vq_params(cfg: VqConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-normal weights, zero biases; channels-last conv layout."""

    def conv_w(kh, kw, c_in, c_out):
        std = math.sqrt(2.0 / (kh * kw * c_in))
        return (rng.standard_normal((kh, kw, c_in, c_out)) * std).astype(np.float32)

    params: dict[str, np.ndarray] = {}
    n_down = _n_down(cfg)
    enc_chain = (3,) + cfg.channels
    for i in range(n_down):
        params[f"vq.encoder.conv{i}.weight"] = conv_w(4, 4, enc_chain[i], enc_chain[i + 1])
        params[f"vq.encoder.conv{i}.bias"] = np.zeros(enc_chain[i + 1], dtype=np.float32)
    params["vq.encoder.proj.weight"] = conv_w(3, 3, enc_chain[-1], cfg.latent_dim)
    params["vq.encoder.proj.bias"] = np.zeros(cfg.latent_dim, dtype=np.float32)

    dec_chain = cfg.channels[::-1] + (3,)  # after the D -> channels[-1] projection
    proj_out = dec_chain[0] if n_down else 3
    params["vq.decoder.proj.weight"] = conv_w(3, 3, cfg.latent_dim, proj_out)
    params["vq.decoder.proj.bias"] = np.zeros(proj_out, dtype=np.float32)
    for i in range(n_down):
        c_in, c_out = dec_chain[i], dec_chain[i + 1]
        # transposed conv: weight is (kh, kw, c_out, c_in), std from the
        # effective fan-in per output site (kh*kw*c_in / stride^2)
        std = math.sqrt(2.0 / (4 * c_in))
        params[f"vq.decoder.conv{i}.weight"] = (
            rng.standard_normal((4, 4, c_out, c_in)) * std
        ).astype(np.float32)
        params[f"vq.decoder.conv{i}.bias"] = np.zeros(c_out, dtype=np.float32)
    return params


def encoder_forward(params: dict[str, np.ndarray], x: np.ndarray, cfg: VqConfig):
    """x (B, H, W, 3) -> latent (B, Hg, Wg, D) plus backward cache."""
    n_down = _n_down(cfg)
    conv_caches = []
    a = x
    for i in range(n_down):
        w = params[f"vq.encoder.conv{i}.weight"]
        in_shape = a.shape
        h, cols = nn.conv2d(a, w, params[f"vq.encoder.conv{i}.bias"], stride=2, pad=1)
        a, t = nn.gelu_fwd(h)
        conv_caches.append((in_shape, cols, h, t))
    w = params["vq.encoder.proj.weight"]
    z, cols = nn.conv2d(a, w, params["vq.encoder.proj.bias"], stride=1, pad=1)
    return z, (conv_caches, a.shape, cols)


def encoder_backward(params, cache, dz, cfg: VqConfig) -> dict[str, np.ndarray]:
    conv_caches, a_shape, proj_cols = cache
    grads: dict[str, np.ndarray] = {}
    da, dw, db = nn.conv2d_backward(dz, proj_cols, a_shape, params["vq.encoder.proj.weight"], 1, 1)
    grads["vq.encoder.proj.weight"] = dw
    grads["vq.encoder.proj.bias"] = db
    for i in reversed(range(_n_down(cfg))):
        in_shape, cols, h, t = conv_caches[i]
        dh = da * nn.gelu_grad(h, t)
        da, dw, db = nn.conv2d_backward(dh, cols, in_shape, params[f"vq.encoder.conv{i}.weight"], 2, 1)
        grads[f"vq.encoder.conv{i}.weight"] = dw
        grads[f"vq.encoder.conv{i}.bias"] = db
    return grads


def decoder_forward(params: dict[str, np.ndarray], zq: np.ndarray, cfg: VqConfig):
    """zq (B, Hg, Wg, D) -> raw reconstruction (B, H, W, 3) plus cache."""
    n_down = _n_down(cfg)
    h0, proj_cols = nn.conv2d(
        zq, params["vq.decoder.proj.weight"], params["vq.decoder.proj.bias"], 1, 1
    )
    if n_down:
        u, t0 = nn.gelu_fwd(h0)
    else:
        u, t0 = h0, None
    t_caches = []
    for i in range(n_down):
        w = params[f"vq.decoder.conv{i}.weight"]
        y = nn.conv2d_transpose(u, w, params[f"vq.decoder.conv{i}.bias"], stride=2, pad=1)
        if i < n_down - 1:
            nxt, t = nn.gelu_fwd(y)
            t_caches.append((u, y, t))
            u = nxt
        else:  # final layer is linear; clamping happens only in decode()
            t_caches.append((u, None, None))
            u = y
    return u, (zq.shape, proj_cols, h0, t0, t_caches)


def decoder_backward(params, cache, dout, cfg: VqConfig):
    zq_shape, proj_cols, h0, t0, t_caches = cache
    n_down = _n_down(cfg)
    grads: dict[str, np.ndarray] = {}
    du = dout
    for i in reversed(range(n_down)):
        u_in, pre_act, t = t_caches[i]
        dy = du if pre_act is None else du * nn.gelu_grad(pre_act, t)
        w = params[f"vq.decoder.conv{i}.weight"]
        du, dw, db = nn.conv2d_transpose_backward(dy, u_in, w, stride=2, pad=1)
        grads[f"vq.decoder.conv{i}.weight"] = dw
        grads[f"vq.decoder.conv{i}.bias"] = db
    dh0 = du * nn.gelu_grad(h0, t0) if n_down else du
    dzq, dw, db = nn.conv2d_backward(dh0, proj_cols, zq_shape, params["vq.decoder.proj.weight"], 1, 1)
    grads["vq.decoder.proj.weight"] = dw
    grads["vq.decoder.proj.bias"] = db
    return dzq, grads


def vq_loss_and_grads(
    params: dict[str, np.ndarray],
    images: np.ndarray,
    entries: np.ndarray,
    beta: float,
    cfg: VqConfig,
    assignments: np.ndarray | None = None,
    frozen_offset: np.ndarray | None = None,
):
    """One VQ objective evaluation with gradients.

    Training path (assignments=None): decoder sees the quantized latents and
    the encoder receives the straight-through copy of the reconstruction
    gradient plus the commitment gradient.

    Gradient-check path: pass the base-point ``assignments`` and
    ``frozen_offset`` (z_q - z_e at the base point) so the objective becomes
    the smooth STE surrogate whose exact gradient the training path computes.
    """
    z, enc_cache = encoder_forward(params, images, cfg)
    d = z.shape[-1]
    flat_z = z.reshape(-1, d)
    ids = nearest_codes(flat_z, entries) if assignments is None else assignments
    zq = entries.astype(z.dtype, copy=False)[ids].reshape(z.shape)
    dec_in = zq if frozen_offset is None else z + frozen_offset
    recon_raw, dec_cache = decoder_forward(params, dec_in, cfg)

    resid = recon_raw - images.astype(z.dtype, copy=False)
    recon = float(np.mean(resid.astype(np.float64) ** 2))
    commit_diff = z - zq
    commit_raw = float(np.mean(commit_diff.astype(np.float64) ** 2))

    d_recon = (2.0 / resid.size) * resid
    d_dec_in, grads = decoder_backward(params, dec_cache, d_recon, cfg)
    dz = d_dec_in + (2.0 * beta / commit_diff.size) * commit_diff  # straight-through + commitment
    grads.update(encoder_backward(params, enc_cache, dz, cfg))

    offset = zq - z
    return recon, commit_raw, grads, ids, flat_z, offset


def vq_surrogate_loss(params, images, entries, beta, cfg, assignments, frozen_offset) -> float:
    """Scalar STE surrogate objective (for finite-difference checks)."""
    recon, commit_raw, _, _, _, _ = vq_loss_and_grads(
        params, images, entries, beta, cfg, assignments=assignments, frozen_offset=frozen_offset
    )
    return recon + beta * commit_raw


def ema_update(
    codebook: Codebook,
    flat_latents: np.ndarray,
    ids: np.ndarray,
    decay: float,
    dead_eps: float,
    rng: np.random.Generator,
) -> None:
    """Decay cluster counts/sums toward the batch statistics; reseed dead codes."""
    k, d = codebook.entries.shape
    counts_batch = np.bincount(ids, minlength=k).astype(np.float32)
    sums_batch = np.zeros((k, d), dtype=np.float32)
    np.add.at(sums_batch, ids, flat_latents.astype(np.float32, copy=False))

    codebook.ema_counts *= np.float32(decay)
    codebook.ema_counts += np.float32(1.0 - decay) * counts_batch
    codebook.ema_sums *= np.float32(decay)
    codebook.ema_sums += np.float32(1.0 - decay) * sums_batch
    codebook.entries = codebook.ema_sums / np.maximum(codebook.ema_counts, np.float32(1e-12))[:, None]

    dead = codebook.ema_counts < dead_eps
    n_dead = int(dead.sum())
    if n_dead:
        picks = rng.integers(0, flat_latents.shape[0], size=n_dead)
        seeds = flat_latents[picks].astype(np.float32)
        codebook.entries[dead] = seeds
        codebook.ema_counts[dead] = 1.0
        codebook.ema_sums[dead] = seeds


class VqTokenizer:
    """Encoder + codebook + decoder with a momentum-SGD training step."""

    def __init__(
        self,
        config: VqConfig,
        params: dict[str, np.ndarray] | None = None,
        codebook: Codebook | None = None,
    ):
        self.config = config
        rng = nn.rng_for(config.seed)
        self.params = params if params is not None else init_vq_params(config, rng)
        self.codebook = (
            codebook
            if codebook is not None
            else Codebook.initial(config.codebook_size, config.latent_dim, rng)
        )
        self.rng = rng
        self.opt = nn.SgdMomentum(momentum=config.momentum)
        self._step = 0

    def _check_image(self, image: np.ndarray) -> None:
        h, w = self.config.image_hw
        if image.shape != (h, w, 3):
            raise ShapeError(f"expected image of shape {(h, w, 3)}, got {image.shape}")

    def encode(self, image: np.ndarray) -> np.ndarray:
        """Image (H, W, 3) -> latent grid (Hg, Wg, D)."""
        self._check_image(image)
        z, _ = encoder_forward(self.params, image[None].astype(np.float32, copy=False), self.config)
        return z[0]

    def quantize(self, latent: np.ndarray) -> np.ndarray:
        return quantize(latent, self.codebook)

    def tokenize(self, image: np.ndarray) -> np.ndarray:
        return self.quantize(self.encode(image))

    def embed(self, ids: np.ndarray) -> np.ndarray:
        return embed(ids, self.codebook)

    def decode(self, ids: np.ndarray) -> np.ndarray:
        """Token grid (Hg, Wg) -> image (H, W, 3), clamped to [0, 1]."""
        gh, gw = self.config.grid_hw
        ids = np.asarray(ids)
        if ids.shape != (gh, gw):
            raise ShapeError(f"expected token grid of shape {(gh, gw)}, got {ids.shape}")
        zq = self.embed(ids)[None]
        raw, _ = decoder_forward(self.params, zq, self.config)
        return np.clip(raw[0], 0.0, 1.0).astype(np.float32)

    def reconstruct(self, image: np.ndarray) -> np.ndarray:
        return self.decode(self.tokenize(image))

    def _seed_codebook_from(self, images: np.ndarray) -> None:
        """Data-dependent codebook init: draw entries from first-batch latents."""
        z, _ = encoder_forward(self.params, images, self.config)
        flat = z.reshape(-1, self.config.latent_dim)
        picks = self.rng.integers(0, flat.shape[0], size=self.config.codebook_size)
        seeds = flat[picks].astype(np.float32)
        self.codebook.entries = seeds.copy()
        self.codebook.ema_counts = np.ones(self.config.codebook_size, dtype=np.float32)
        self.codebook.ema_sums = seeds.copy()

    def train_step(self, images: np.ndarray) -> VqLoss:
        """One gradient + EMA update on a batch (B, H, W, 3) of images."""
        if images.ndim != 4 or images.shape[0] < 1:
            raise ShapeError(f"expected a non-empty image batch, got shape {images.shape}")
        h, w = self.config.image_hw
        if images.shape[1:] != (h, w, 3):
            raise ShapeError(f"batch images must be {(h, w, 3)}, got {images.shape[1:]}")
        cfg = self.config
        beta = cfg.commitment_weight
        images = images.astype(np.float32, copy=False)
        if self._step == 0:
            self._seed_codebook_from(images)
        recon, commit_raw, grads, ids, flat_z, _ = vq_loss_and_grads(
            self.params, images, self.codebook.entries, beta, cfg
        )
        total = recon + beta * commit_raw
        if not np.isfinite(total):
            raise DivergenceError(
                "VQ training loss is non-finite", step=self._step, learning_rate=cfg.learning_rate
            )
        nn.clip_grads(grads, cfg.grad_clip)
        self.opt.step(self.params, grads, cfg.learning_rate)
        ema_update(self.codebook, flat_z, ids, cfg.ema_decay, cfg.dead_code_eps, self.rng)
        self._step += 1
        usage = float(np.unique(ids).size / cfg.codebook_size)
        return VqLoss(reconstruction=recon, commitment=beta * commit_raw, code_usage=usage)

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = dict(self.params)
        tensors["vq.codebook"] = self.codebook.entries
        tensors["vq.ema.counts"] = self.codebook.ema_counts
        tensors["vq.ema.sums"] = self.codebook.ema_sums
        return tensors

    @classmethod
    def from_tensors(cls, config: VqConfig, tensors: dict[str, np.ndarray]) -> "VqTokenizer":
        params = {k: v for k, v in tensors.items() if k.startswith(("vq.encoder.", "vq.decoder."))}
        codebook = Codebook(
            entries=tensors["vq.codebook"],
            ema_counts=tensors["vq.ema.counts"],
            ema_sums=tensors["vq.ema.sums"],
        )
        return cls(config, params=params, codebook=codebook)
