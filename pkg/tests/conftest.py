"""Shared test fixtures for vidssl tests."""

import pytest
import torch

from vidssl.config import Config, ConfigManager
from vidssl.encoder import VisionTransformer
from vidssl.synthetic import gen_synthetic_clip, write_synthetic_dataset


TINY_OVERRIDES = [
    "model.image_size=32",
    "model.local_size=16",
    "model.patch_size=8",
    "model.dim=24",
    "model.depth=2",
    "model.heads=4",
    "head.out_dim=32",
    "data.base_crop_size=32",
    "data.n_local=2",
    "data.clips_per_step=2",
    "data.T=2",
    "train.total_steps=4",
    "train.checkpoint_every=2",
    "train.log_every=1",
    "optim.warmup_steps=1",
]


@pytest.fixture
def tiny_config() -> Config:
    """A configuration small enough for CPU tests (32x32 frames, 4x4 token grid)."""
    mgr = ConfigManager()
    mgr.apply_overrides(TINY_OVERRIDES)
    mgr.validate()
    return mgr.config


@pytest.fixture
def tiny_config_file(tmp_path, tiny_config):
    """The tiny configuration written to a YAML file."""
    return ConfigManager.from_config(tiny_config).save(tmp_path / "tiny.yaml")


@pytest.fixture
def tiny_encoder(tiny_config) -> VisionTransformer:
    """A seeded encoder matching ``tiny_config``."""
    return VisionTransformer.from_config(tiny_config.model, seed=0).eval()


@pytest.fixture
def small_encoder() -> VisionTransformer:
    """The default desk-scale encoder (64x64 frames, 8x8 token grid, 6 heads)."""
    return VisionTransformer.from_config(Config().model, seed=0).eval()


@pytest.fixture
def random_frame():
    """A seeded 32x32 RGB frame."""
    generator = torch.Generator().manual_seed(0)
    return torch.rand(3, 32, 32, generator=generator)


@pytest.fixture
def synthetic_clip():
    """A 3-object, 32x32, 2-frame synthetic clip."""
    return gen_synthetic_clip(n_objects=3, size=32, T=2, seed=0)


@pytest.fixture
def synthetic_root(tmp_path):
    """A written synthetic dataset: 2 clips of 32x32 frames plus a shape split."""
    root = tmp_path / "data"
    write_synthetic_dataset(root, n_clips=2, n_objects=3, size=32, T=2, seed=0, n_shapes=24)
    return root
