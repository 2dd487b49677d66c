"""Joint video relighting and albedo estimation at desk scale.

A numpy library covering the full loop: procedural path-traced
multi-illumination data, HDR lighting encoding, an invertible tokenizer,
a joint-denoising diffusion transformer with exact reverse-mode gradients,
variance-exploding diffusion training/sampling, and scale-aligned metrics.
"""

__version__ = "0.1.0"

from . import autodiff, dataio, diffusion, envlight, metrics, model, pipeline, render
from . import tokenizer, trainer

__all__ = [
    "autodiff",
    "dataio",
    "diffusion",
    "envlight",
    "metrics",
    "model",
    "pipeline",
    "render",
    "tokenizer",
    "trainer",
]
