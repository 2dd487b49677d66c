import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relight.tokenizer import (
    TokenizerConfig,
    decode,
    decode_image,
    encode,
    encode_image,
    latent_dims,
)


def test_latent_dims_example():
    cfg = TokenizerConfig(temporal_factor=2, spatial_factor=4)
    assert latent_dims((8, 32, 32), cfg) == (4, 8, 8, 96)


def test_latent_dims_identity_config():
    cfg = TokenizerConfig(1, 1)
    assert latent_dims((5, 7, 9), cfg) == (5, 7, 9, 3)


def test_non_divisible_rejected():
    cfg = TokenizerConfig(2, 4)
    with pytest.raises(ValueError):
        latent_dims((57, 32, 32), cfg)
    with pytest.raises(ValueError):
        encode(np.zeros((8, 30, 32, 3)), cfg)


def test_encode_shape_and_midgray():
    cfg = TokenizerConfig(2, 4)
    video = np.full((8, 32, 32, 3), 0.5)
    z = encode(video, cfg)
    assert z.shape == (4, 8, 8, 96)
    assert np.abs(z).max() == 0.0


def test_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    for cfg in [TokenizerConfig(2, 4), TokenizerConfig(1, 2), TokenizerConfig(1, 1)]:
        for _ in range(10):
            video = rng.uniform(0, 1, size=(4, 8, 8, 3)).astype(np.float64)
            assert (decode(encode(video, cfg), cfg) == video).all()


@settings(max_examples=25, deadline=None)
@given(ft=st.integers(1, 3), fs=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_channel_law_and_round_trip(ft, fs, seed):
    cfg = TokenizerConfig(ft, fs)
    assert cfg.channels == 3 * ft * fs**2
    rng = np.random.default_rng(seed)
    video = rng.uniform(0, 1, size=(2 * ft, 2 * fs, 3 * fs, 3))
    z = encode(video, cfg)
    assert z.shape == (2, 2, 3, cfg.channels)
    assert (decode(z, cfg) == video).all()


def test_affine_law():
    cfg = TokenizerConfig(2, 2)
    rng = np.random.default_rng(1)
    u = rng.uniform(0, 1, size=(4, 4, 4, 3))
    v = rng.uniform(0, 1, size=(4, 4, 4, 3))
    alpha, beta = 0.3, 1.4
    # affine-map law: E(au+bv) = a*E(u) + b*E(v) - (a+b-1)*E(0)
    lhs = encode(alpha * u + beta * v, cfg)
    rhs = alpha * encode(u, cfg) + beta * encode(v, cfg) - (alpha + beta - 1) * encode(
        np.zeros_like(u), cfg
    )
    assert np.allclose(lhs, rhs, atol=1e-12)


def test_shape_mismatch_on_decode():
    cfg = TokenizerConfig(2, 4)
    with pytest.raises(ValueError):
        decode(np.zeros((4, 8, 8, 95)), cfg)


def test_image_round_trip():
    cfg = TokenizerConfig(2, 4)
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 1, size=(32, 32, 3))
    z = encode_image(img, cfg)
    assert z.shape == (1, 8, 8, 96)
    assert (decode_image(z, cfg) == img).all()
