import numpy as np
import pytest

from tokenloom.config import ModelConfig, RunConfig, VqConfig
from tokenloom.vocab import VocabLayout
from tokenloom.vq import VqTokenizer


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_vq_config():
    # 8x8 images, f=2 -> 4x4 grid of 3-d latents, 7 codes
    return VqConfig(
        codebook_size=7,
        latent_dim=3,
        image_hw=(8, 8),
        downsample=2,
        channels=(6,),
        seed=2,
    )


@pytest.fixture
def tiny_vq(tiny_vq_config):
    return VqTokenizer(tiny_vq_config)


@pytest.fixture
def tiny_layout(tiny_vq_config):
    return VocabLayout.from_vq_config(tiny_vq_config)


@pytest.fixture
def tiny_model_config(tiny_layout):
    return ModelConfig(
        vocab_size=tiny_layout.total,
        d_model=8,
        n_layers=2,
        n_heads=2,
        d_ff=16,
        max_seq_len=24,
        seed=3,
    )


@pytest.fixture
def small_run_config():
    """A miniature but fully consistent pipeline config (32x32 images)."""
    vq = VqConfig(codebook_size=64, latent_dim=8, channels=(16, 32), seed=0)
    model = ModelConfig(
        vocab_size=256 + 64 + 5, d_model=32, n_layers=2, n_heads=4, d_ff=64,
        max_seq_len=96, seed=0,
    )
    return RunConfig(vq=vq, model=model, vq_steps=40, vq_batch_size=16)
