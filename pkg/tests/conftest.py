import numpy as np
import pytest

from relight.dataio import make_dataset
from relight.model import ModelConfig, init_params, save_checkpoint
from relight.render import RenderConfig, SceneLimits
from relight.tokenizer import TokenizerConfig


@pytest.fixture(scope="session")
def shared_dataset(tmp_path_factory):
    """Small rendered dataset: 5 scenes (2 test), 2x16x16 videos, 8x16 envs."""
    out = tmp_path_factory.mktemp("shared_ds")
    cfg = RenderConfig(width=16, height=16, frames=2, spp=8, seed=0)
    manifest = make_dataset(
        5, cfg, out, master_seed=21, n_test=2,
        limits=SceneLimits(lambertian_only=True), env_hw=(8, 16),
    )
    return manifest


@pytest.fixture(scope="session")
def shared_checkpoint(tmp_path_factory):
    """Untrained tiny joint checkpoint with the tokenizer echoed in meta."""
    tok_cfg = TokenizerConfig(1, 2)
    model_cfg = ModelConfig(latent_channels=tok_cfg.channels, width=32, depth=1, heads=2)
    params = init_params(model_cfg, seed=13)
    path = tmp_path_factory.mktemp("ckpt") / "tiny.rlm"
    save_checkpoint(
        path, params, model_cfg,
        extra={"tokenizer": {"temporal_factor": 1, "spatial_factor": 2}},
    )
    return path
