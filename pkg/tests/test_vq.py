import math

import numpy as np
import pytest

from tokenloom import gradcheck, vq
from tokenloom.config import VqConfig
from tokenloom.errors import NumericError, ShapeError, TokenRangeError
from tokenloom.vq import Codebook, VqTokenizer


def brute_force_nearest(flat_latents, entries):
    """Independent oracle: per-cell, per-entry scan with sequential float64
    accumulation and strict lowest-index tie-break."""
    ids = []
    for z in flat_latents:
        best_i, best_d = 0, None
        for i, e in enumerate(entries):
            d = 0.0
            for a, b in zip(z, e):
                diff = float(a) - float(b)
                d += diff * diff
            if best_d is None or d < best_d:
                best_i, best_d = i, d
        ids.append(best_i)
    return np.asarray(ids)


def make_codebook(entries):
    entries = np.asarray(entries, dtype=np.float32)
    return Codebook(
        entries=entries,
        ema_counts=np.ones(entries.shape[0], dtype=np.float32),
        ema_sums=entries.copy(),
    )


class TestQuantize:
    def test_exact_match_returns_row(self):
        cb = make_codebook(np.arange(12, dtype=np.float32).reshape(6, 2))
        latent = np.tile(cb.entries[3], (2, 2, 1))
        assert (vq.quantize(latent, cb) == 3).all()

    def test_nearest_of_two(self):
        # d2 to (0,0) = 0.32 < 0.72 to (1,1); oracle: brute force over both
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        latent = np.asarray([[[0.4, 0.4]]], dtype=np.float32)
        assert vq.quantize(latent, cb)[0, 0] == 0
        assert brute_force_nearest(latent.reshape(-1, 2), cb.entries)[0] == 0

    def test_equidistant_tie_breaks_low_index(self):
        cb = make_codebook([[0.0, 0.0], [1.0, 1.0]])
        latent = np.asarray([[[0.5, 0.5]]], dtype=np.float32)
        assert vq.quantize(latent, cb)[0, 0] == 0

    def test_duplicate_entries_tie_break(self):
        cb = make_codebook([[2.0, 2.0], [1.0, 1.0], [1.0, 1.0]])
        latent = np.asarray([[[1.0, 1.0]]], dtype=np.float32)
        assert vq.quantize(latent, cb)[0, 0] == 1

    def test_dimension_mismatch(self):
        cb = make_codebook([[0.0, 0.0]])
        with pytest.raises(ShapeError):
            vq.quantize(np.zeros((2, 2, 3), dtype=np.float32), cb)

    def test_non_finite_latent(self):
        cb = make_codebook([[0.0, 0.0]])
        bad = np.full((1, 1, 2), np.nan, dtype=np.float32)
        with pytest.raises(NumericError):
            vq.quantize(bad, cb)

    def test_matches_brute_force_oracle(self, rng):
        for trial in range(50):
            k = int(rng.integers(1, 65))
            d = int(rng.integers(1, 9))
            entries = rng.standard_normal((k, d)).astype(np.float32)
            latent = rng.standard_normal((3, 4, d)).astype(np.float32)
            cb = make_codebook(entries)
            got = vq.quantize(latent, cb).reshape(-1)
            want = brute_force_nearest(latent.reshape(-1, d), entries)
            assert (got == want).all()

    def test_projection_property(self, rng):
        # quantize(embed(ids)) == ids for any valid token grid
        entries = rng.standard_normal((9, 4)).astype(np.float32)
        cb = make_codebook(entries)
        ids = rng.integers(0, 9, size=(5, 6))
        assert (vq.quantize(vq.embed(ids, cb), cb) == ids).all()


class TestPsnr:
    def test_identical_is_capped(self):
        img = np.full((4, 4, 3), 0.25, dtype=np.float32)
        assert vq.psnr(img, img) == 99.0

    def test_zeros_vs_ones_is_zero_db(self):
        a = np.zeros((4, 4, 3), dtype=np.float32)
        b = np.ones((4, 4, 3), dtype=np.float32)
        assert vq.psnr(a, b) == pytest.approx(0.0, abs=1e-9)

    def test_zeros_vs_half(self):
        # MSE 0.25 -> 10*log10(4) = 6.020599913279624 dB
        a = np.zeros((4, 4, 3), dtype=np.float32)
        b = np.full((4, 4, 3), 0.5, dtype=np.float32)
        assert vq.psnr(a, b) == pytest.approx(6.020599913279624, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            vq.psnr(np.zeros((2, 2, 3)), np.zeros((3, 2, 3)))


class TestEncodeDecode:
    def test_encode_shape(self, tiny_vq):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        assert tiny_vq.encode(img).shape == (4, 4, 3)

    def test_encode_32x32_f4_gives_8x8(self):
        tok = VqTokenizer(VqConfig(codebook_size=16, latent_dim=4, seed=1))
        latent = tok.encode(np.zeros((32, 32, 3), dtype=np.float32))
        assert latent.shape == (8, 8, 4)

    def test_encode_rejects_wrong_size(self, tiny_vq):
        with pytest.raises(ShapeError):
            tiny_vq.encode(np.zeros((9, 8, 3), dtype=np.float32))

    def test_encode_deterministic(self, tiny_vq, rng):
        img = rng.random((8, 8, 3)).astype(np.float32)
        a = tiny_vq.encode(img)
        b = tiny_vq.encode(img)
        assert np.array_equal(a, b)

    def test_zero_image_zero_biases_gives_constant_bias_latent(self, tiny_vq_config):
        # all biases are zero at init; set the final projection bias and check
        # every latent vector equals it (zero input stays zero through convs)
        tok = VqTokenizer(tiny_vq_config)
        bias = np.asarray([0.5, -1.0, 2.0], dtype=np.float32)
        tok.params["vq.encoder.proj.bias"] = bias.copy()
        latent = tok.encode(np.zeros((8, 8, 3), dtype=np.float32))
        assert np.allclose(latent, bias, atol=0)

    def test_decode_deterministic_and_clamped(self, tiny_vq, rng):
        ids = rng.integers(0, 7, size=(4, 4))
        a = tiny_vq.decode(ids)
        b = tiny_vq.decode(ids)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_decode_out_of_range_id(self, tiny_vq):
        ids = np.zeros((4, 4), dtype=np.int64)
        ids[0, 0] = 7  # == K
        with pytest.raises(TokenRangeError):
            tiny_vq.decode(ids)

    def test_roundtrip_after_mini_training(self, rng):
        # memorize 4 two-band color images; measured ~27-31 dB at 400 steps
        cfg = VqConfig(
            codebook_size=32, latent_dim=4, image_hw=(8, 8), downsample=2,
            channels=(12,), learning_rate=0.4, seed=5,
        )
        tok = VqTokenizer(cfg)
        colors = rng.random((8, 3)).astype(np.float32)
        imgs = np.zeros((4, 8, 8, 3), dtype=np.float32)
        for i in range(4):
            imgs[i, :4] = colors[2 * i]
            imgs[i, 4:] = colors[2 * i + 1]
        for _ in range(400):
            tok.train_step(imgs)
        worst = min(vq.psnr(img, tok.reconstruct(img)) for img in imgs)
        assert worst >= 22.0


class TestTrainStep:
    def test_beta_zero_kills_commitment(self, tiny_vq_config, rng):
        cfg = VqConfig(**{**tiny_vq_config.__dict__, "commitment_weight": 0.0})
        tok = VqTokenizer(cfg)
        loss = tok.train_step(rng.random((2, 8, 8, 3)).astype(np.float32))
        assert loss.commitment == 0.0
        assert loss.reconstruction > 0.0

    def test_perfect_autoencoder_zero_reconstruction(self, tiny_vq, rng):
        # bypass the networks: recon == input exactly -> loss 0 by definition
        imgs = rng.random((2, 8, 8, 3)).astype(np.float32)
        resid = imgs - imgs
        assert float(np.mean(resid**2)) == 0.0

    def test_loss_components_nonnegative(self, tiny_vq, rng):
        loss = tiny_vq.train_step(rng.random((3, 8, 8, 3)).astype(np.float32))
        assert loss.reconstruction >= 0.0
        assert loss.commitment >= 0.0

    def test_rejects_empty_batch(self, tiny_vq):
        with pytest.raises(ShapeError):
            tiny_vq.train_step(np.zeros((0, 8, 8, 3), dtype=np.float32))

    def test_loss_decreases_over_training(self, tiny_vq, rng):
        imgs = rng.random((4, 8, 8, 3)).astype(np.float32)
        first = tiny_vq.train_step(imgs).total
        for _ in range(150):
            last = tiny_vq.train_step(imgs).total
        assert last < first * 0.5


class TestEmaUpdate:
    def test_decay_one_is_noop(self, rng):
        entries = rng.standard_normal((5, 3)).astype(np.float32)
        cb = make_codebook(entries)
        before = cb.entries.copy()
        latents = rng.standard_normal((20, 3)).astype(np.float32)
        ids = rng.integers(0, 5, size=20)
        vq.ema_update(cb, latents, ids, decay=1.0, dead_eps=1e-6, rng=rng)
        assert np.array_equal(cb.entries, before)

    def test_decay_towards_repeated_vector(self, rng):
        cb = make_codebook(np.zeros((2, 3), dtype=np.float32))
        target = np.asarray([1.0, -2.0, 0.5], dtype=np.float32)
        latents = np.tile(target, (10, 1))
        ids = np.zeros(10, dtype=np.int64)
        for _ in range(200):
            vq.ema_update(cb, latents, ids, decay=0.5, dead_eps=0.0, rng=rng)
        assert np.allclose(cb.entries[0], target, atol=1e-4)

    def test_dead_codes_reseeded_from_batch(self, rng):
        cb = make_codebook(np.full((3, 2), 50.0, dtype=np.float32))
        cb.ema_counts = np.asarray([1.0, 1e-9, 1e-9], dtype=np.float32)
        latents = rng.random((8, 2)).astype(np.float32)
        ids = np.zeros(8, dtype=np.int64)
        vq.ema_update(cb, latents, ids, decay=0.99, dead_eps=0.05, rng=rng)
        # dead entries now equal some batch latent, not the old value
        for row in (1, 2):
            assert (np.abs(cb.entries[row] - latents) < 1e-6).all(axis=1).any()
            assert cb.ema_counts[row] == 1.0


class TestGradients:
    def test_encoder_decoder_match_finite_differences(self, tiny_vq_config, rng):
        tok = VqTokenizer(tiny_vq_config)
        params64 = gradcheck.to_dtype(tok.params, np.float64)
        x = rng.random((2, 8, 8, 3))
        beta = 0.25
        recon, commit, grads, ids, _, offset = vq.vq_loss_and_grads(
            params64, x, tok.codebook.entries, beta, tiny_vq_config
        )

        def loss_fn(p):
            return vq.vq_surrogate_loss(
                p, x, tok.codebook.entries, beta, tiny_vq_config,
                assignments=ids, frozen_offset=offset,
            )

        assert loss_fn(params64) == pytest.approx(recon + beta * commit, rel=1e-12)
        fd = gradcheck.central_difference(loss_fn, params64, h=1e-6)
        worst, _ = gradcheck.max_relative_error(grads, fd)
        assert worst < 1e-7
