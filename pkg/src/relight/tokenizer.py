"""Invertible spatiotemporal patch tokenizer.

Stands in for a learned video autoencoder: a lossless space-to-channel
rearrangement followed by the affine map x -> 2x - 1. Because it is exactly
bijective, every downstream test can decode predictions without a
reconstruction-error confound. The channel count follows
C = 3 * f_t * f_s**2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TokenizerConfig:
    temporal_factor: int = 2
    spatial_factor: int = 4

    def __post_init__(self):
        if self.temporal_factor < 1 or self.spatial_factor < 1:
            raise ValueError("tokenizer factors must be >= 1")

    @property
    def channels(self):
        return 3 * self.temporal_factor * self.spatial_factor**2


def latent_dims(video_shape, cfg: TokenizerConfig):
    """(L, H, W) -> (l, h, w, C); raises on non-divisible dims."""
    frames, height, width = video_shape
    ft, fs = cfg.temporal_factor, cfg.spatial_factor
    if frames % ft or height % fs or width % fs:
        raise ValueError(
            f"video dims {video_shape} not divisible by factors (f_t={ft}, f_s={fs})"
        )
    return frames // ft, height // fs, width // fs, cfg.channels


def encode(video, cfg: TokenizerConfig):
    """(L, H, W, 3) video in [0, 1] -> (l, h, w, C) latent; exactly invertible."""
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ValueError(f"expected (L, H, W, 3) video, got {video.shape}")
    l, h, w, c = latent_dims(video.shape[:3], cfg)
    ft, fs = cfg.temporal_factor, cfg.spatial_factor
    x = video.reshape(l, ft, h, fs, w, fs, 3)
    x = x.transpose(0, 2, 4, 1, 3, 5, 6)  # (l, h, w, ft, fs, fs, 3)
    latent = x.reshape(l, h, w, c)
    return (2.0 * latent - 1.0).astype(video.dtype)


def decode(latent, cfg: TokenizerConfig):
    """Exact inverse of encode."""
    latent = np.asarray(latent)
    ft, fs = cfg.temporal_factor, cfg.spatial_factor
    if latent.ndim != 4 or latent.shape[3] != cfg.channels:
        raise ValueError(
            f"expected latent with C={cfg.channels} channels, got shape {latent.shape}"
        )
    l, h, w, _ = latent.shape
    x = (latent + 1.0) / 2.0
    x = x.reshape(l, h, w, ft, fs, fs, 3)
    x = x.transpose(0, 3, 1, 4, 2, 5, 6)  # (l, ft, h, fs, w, fs, 3)
    return x.reshape(l * ft, h * fs, w * fs, 3).astype(latent.dtype)


def encode_image(image, cfg: TokenizerConfig):
    """Encode a single image as a one-latent-frame static clip.

    Images enter training as single-frame videos; with a temporal factor
    f_t the frame is replicated f_t times so the latent has l = 1 and the
    same channel count as video latents.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {image.shape}")
    clip = np.broadcast_to(image, (cfg.temporal_factor, *image.shape))
    return encode(np.ascontiguousarray(clip), cfg)


def decode_image(latent, cfg: TokenizerConfig):
    """First frame of the decoded static clip."""
    return decode(latent, cfg)[0]
