"""Scale-aligned image/video metrics.

Predictions are first aligned to the reference by a per-channel
least-squares scale (the closed-form minimizer of ||s*pred - gt||^2),
which removes the global scale ambiguity of generative outputs; PSNR and
SSIM are computed after alignment. PSNR is capped at 99 dB.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import correlate2d

PSNR_CAP = 99.0


def lsq_scale(pred, gt, mask=None):
    """Per-channel s_c = sum(pred*gt) / sum(pred^2); returns (s, s*pred).

    A channel with zero prediction energy gets s_c = 1. `mask`, if given,
    selects the pixels entering the sums (broadcast over channels).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=np.float64)[..., None]
        num = (pred * gt * m).reshape(-1, pred.shape[-1]).sum(axis=0)
        den = (pred * pred * m).reshape(-1, pred.shape[-1]).sum(axis=0)
    else:
        num = (pred * gt).reshape(-1, pred.shape[-1]).sum(axis=0)
        den = (pred * pred).reshape(-1, pred.shape[-1]).sum(axis=0)
    s = np.where(den > 0, num / np.where(den > 0, den, 1.0), 1.0)
    return s, pred * s


def psnr(a, b, peak=1.0, mask=None):
    """10*log10(peak^2 / MSE), capped at 99 dB (identical inputs hit the cap)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    sq = (a - b) ** 2
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=np.float64)[..., None], sq.shape)
        total = m.sum()
        if total == 0:
            return PSNR_CAP
        mse = (sq * m).sum() / total
    else:
        mse = sq.mean()
    if mse <= 0:
        return PSNR_CAP
    return min(10.0 * np.log10(peak**2 / mse), PSNR_CAP)


_SSIM_WIN = 11
_SSIM_SIGMA = 1.5


def _gaussian_window():
    r = _SSIM_WIN // 2
    x = np.arange(-r, r + 1)
    g = np.exp(-(x**2) / (2 * _SSIM_SIGMA**2))
    k = np.outer(g, g)
    return k / k.sum()


_WINDOW = _gaussian_window()


def _ssim_channel(a, b, c1, c2):
    w = _WINDOW
    mu1 = correlate2d(a, w, mode="valid")
    mu2 = correlate2d(b, w, mode="valid")
    s11 = correlate2d(a * a, w, mode="valid") - mu1**2
    s22 = correlate2d(b * b, w, mode="valid") - mu2**2
    s12 = correlate2d(a * b, w, mode="valid") - mu1 * mu2
    return ((2 * mu1 * mu2 + c1) * (2 * s12 + c2)) / (
        (mu1**2 + mu2**2 + c1) * (s11 + s22 + c2)
    )


def ssim(a, b, peak=1.0, k1=0.01, k2=0.03, mask=None):
    """Windowed SSIM (11x11 Gaussian, sigma 1.5), per channel then averaged.

    Accepts (H, W, 3) images or (L, H, W, 3) videos (frame-averaged);
    symmetric in its arguments. Frames must be at least 11x11.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a[None]
        b = b[None]
        if mask is not None:
            mask = np.asarray(mask)[None]
    if a.shape[1] < _SSIM_WIN or a.shape[2] < _SSIM_WIN:
        raise ValueError(f"frames must be at least {_SSIM_WIN}x{_SSIM_WIN}")
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    r = _SSIM_WIN // 2
    values = []
    weights = []
    for f in range(a.shape[0]):
        for ch in range(a.shape[3]):
            smap = _ssim_channel(a[f, :, :, ch], b[f, :, :, ch], c1, c2)
            if mask is not None:
                mwin = np.asarray(mask, dtype=np.float64)[f, r:-r, r:-r]
                total = mwin.sum()
                values.append((smap * mwin).sum() / total if total > 0 else 1.0)
                weights.append(1.0)
            else:
                values.append(smap.mean())
                weights.append(1.0)
    return float(np.average(values, weights=weights))


@dataclass
class MetricReport:
    """Per-sample and aggregate metrics; aggregates are arithmetic means."""

    per_sample: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    @staticmethod
    def _mean(rows, key):
        vals = [r[key] for r in rows if r.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    def finalize(self):
        keys = ["psnr_relit", "ssim_relit", "psnr_albedo", "ssim_albedo"]
        self.aggregate = {k: self._mean(self.per_sample, k) for k in keys}
        self.aggregate["n_samples"] = len(self.per_sample)
        # schema slot for a perceptual metric; not computed here
        self.aggregate["lpips_relit"] = None
        return self
