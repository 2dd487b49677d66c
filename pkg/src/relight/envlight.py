"""HDR equirectangular environment maps and the lighting encoding.

The lighting condition handed to the denoiser is a triple of buffers per
frame: a Reinhard-tonemapped LDR panorama, a normalized log-intensity map,
and a per-pixel unit direction map, plus the normalizer and a presence flag.

Equirectangular convention (fixed; every direction test anchors on it):
pixel (u, v) in [0,1)^2 maps to azimuth phi = 2*pi*(u - 0.5), polar
theta = pi*v, direction d = (sin(theta)*sin(phi), cos(theta),
-sin(theta)*cos(phi)) in camera coordinates (x right, y up, -z forward).
The map center (u = v = 0.5) is exactly (0, 0, -1).

Rotating an environment is an analytic azimuth offset applied at sample
time, never a pixel resample, so rotations compose exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite/negative radiance or malformed map shapes."""


@dataclass
class EnvironmentMap:
    """Linear-radiance lat-long map with a sample-time yaw offset."""

    pixels: np.ndarray  # (H, W, 3) float32, >= 0, finite
    yaw_offset: float = 0.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise InvalidInputError(f"environment map must be (H, W, 3), got {self.pixels.shape}")
        h, w = self.pixels.shape[:2]
        if h < 2 or w < 4:
            raise InvalidInputError(f"environment map too small: {h}x{w} (need >= 2x4)")
        if not np.isfinite(self.pixels).all():
            raise InvalidInputError("environment map contains non-finite values")
        if (self.pixels < 0).any():
            raise InvalidInputError("environment map contains negative radiance")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class LightingEncoding:
    """Per-frame (ldr, log, dir) buffers; all-zero with present=False."""

    e_ldr: np.ndarray  # (L, H, W, 3) in [0, 1)
    e_log: np.ndarray  # (L, H, W, 3) in [0, 1]
    e_dir: np.ndarray  # (L, H, W, 3) unit vectors
    e_max: float
    present: bool


def reinhard_tonemap(radiance):
    """x / (1 + x), componentwise; maps [0, inf) into [0, 1)."""
    radiance = np.asarray(radiance)
    if not np.isfinite(radiance).all():
        raise InvalidInputError("tonemap input contains non-finite values")
    if (radiance < 0).any():
        raise InvalidInputError("tonemap input contains negative radiance")
    return radiance / (1.0 + radiance)


def log_encode(radiance):
    """ln(E + 1) normalized by its maximum; returns (map, e_max).

    An all-black input yields an all-zero map with e_max reported as 0.
    """
    radiance = np.asarray(radiance)
    if not np.isfinite(radiance).all() or (radiance < 0).any():
        raise InvalidInputError("log encode input must be finite and >= 0")
    logmap = np.log1p(radiance)
    e_max = float(logmap.max()) if logmap.size else 0.0
    if e_max == 0.0:
        return np.zeros_like(logmap), 0.0
    return logmap / e_max, e_max


def _pixel_grid(h, w):
    """Pixel-center (u, v) grid."""
    u = (np.arange(w) + 0.5) / w
    v = (np.arange(h) + 0.5) / h
    return np.meshgrid(u, v)


def direction_map(frames, h, w, yaw_per_frame):
    """Unit direction per pixel per frame; yaw adds to the azimuth."""
    if h < 1 or w < 1:
        raise InvalidInputError("direction map needs positive dimensions")
    yaws = np.asarray(yaw_per_frame, dtype=np.float64)
    if yaws.shape != (frames,):
        raise InvalidInputError(f"need {frames} yaw values, got shape {yaws.shape}")
    uu, vv = _pixel_grid(h, w)
    theta = np.pi * vv
    sin_t = np.sin(theta)
    cos_t = np.cos(theta)
    out = np.empty((frames, h, w, 3), dtype=np.float32)
    for k in range(frames):
        phi = 2.0 * np.pi * (uu - 0.5) + yaws[k]
        out[k, ..., 0] = sin_t * np.sin(phi)
        out[k, ..., 1] = cos_t
        out[k, ..., 2] = -sin_t * np.cos(phi)
    return out


def _bilinear_latlong(pixels, u, v):
    """Bilinear lookup at continuous (u, v); azimuth wraps, polar clamps."""
    h, w = pixels.shape[:2]
    x = u * w - 0.5
    y = np.clip(v * h - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0w = np.mod(x0, w)
    x1w = np.mod(x0 + 1, w)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    p00 = pixels[y0c, x0w]
    p01 = pixels[y0c, x1w]
    p10 = pixels[y1c, x0w]
    p11 = pixels[y1c, x1w]
    top = p00 * (1 - fx) + p01 * fx
    bot = p10 * (1 - fx) + p11 * fx
    return top * (1 - fy) + bot * fy


def resize_env(env: EnvironmentMap, h, w):
    """Bilinear resample honoring the yaw offset; output is (h, w, 3) >= 0."""
    if h < 1 or w < 1:
        raise InvalidInputError("resize target dimensions must be positive")
    uu, vv = _pixel_grid(h, w)
    u_src = uu + env.yaw_offset / (2.0 * np.pi)
    return _bilinear_latlong(env.pixels, u_src, vv).astype(np.float32)


def sample_env(env: EnvironmentMap, directions):
    """Radiance along unit direction(s); inverse of the pixel convention."""
    d = np.asarray(directions, dtype=np.float64)
    single = d.ndim == 1
    d = np.atleast_2d(d)
    norms = np.linalg.norm(d, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-3:
        raise InvalidInputError("sample directions must be unit length (tol 1e-3)")
    dn = d / norms[..., None]
    theta = np.arccos(np.clip(dn[..., 1], -1.0, 1.0))
    phi = np.arctan2(dn[..., 0], -dn[..., 2])
    u = phi / (2.0 * np.pi) + 0.5 + env.yaw_offset / (2.0 * np.pi)
    v = theta / np.pi
    out = _bilinear_latlong(env.pixels, u, v)
    return out[0] if single else out


def rotate_env(env: EnvironmentMap, yaw):
    """Azimuth-offset rotation; exact under composition (no resampling)."""
    return EnvironmentMap(pixels=env.pixels, yaw_offset=env.yaw_offset + float(yaw))


def encode_lighting(env, frames, h, w, yaw_per_frame=None, present=True):
    """Bundle resize + tonemap + log + direction buffers for a clip.

    Per-frame yaw rotates the radiance content while the direction buffer
    stays the fixed pixel-to-direction grid; that way a rotating light
    visibly changes which direction carries its radiance. (If directions
    co-rotated with content, rotation would cancel out of the encoding.)
    The log normalizer e_max is computed over all frames jointly, so a
    rotating light does not flicker in the encoding. With present=False
    (or env=None) every buffer is exactly zero.
    """
    if env is None:
        present = False
    if not present:
        zeros = np.zeros((frames, h, w, 3), dtype=np.float32)
        return LightingEncoding(zeros, zeros.copy(), zeros.copy(), 0.0, False)
    if yaw_per_frame is None:
        yaw_per_frame = np.zeros(frames)
    yaws = np.asarray(yaw_per_frame, dtype=np.float64)
    if yaws.shape != (frames,):
        raise InvalidInputError(f"need {frames} yaw values, got shape {yaws.shape}")
    total_yaws = env.yaw_offset + yaws
    radiance = np.empty((frames, h, w, 3), dtype=np.float32)
    for k in range(frames):
        radiance[k] = resize_env(EnvironmentMap(env.pixels, total_yaws[k]), h, w)
    e_ldr = reinhard_tonemap(radiance).astype(np.float32)
    e_log, e_max = log_encode(radiance)
    e_dir = direction_map(frames, h, w, np.zeros(frames))
    return LightingEncoding(e_ldr, e_log.astype(np.float32), e_dir, e_max, True)


# ---------------------------------------------------------------------------
# chrome-ball light probes


def chrome_probe_to_latlong(probe, out_h, out_w, model="orthographic"):
    """Remap a mirror-ball photograph to a lat-long environment map.

    Orthographic mirror-ball model: a probe pixel at disk offset (px, py)
    has normal n = (px, py, sqrt(1 - px^2 - py^2)); the viewer looks along
    (0, 0, -1), so the reflected direction is r = 2*nz*n - (0, 0, 1).
    The output is built by inverse lookup: for each lat-long direction d the
    half-vector n = normalize(d + (0, 0, 1)) gives the probe coordinate.
    The badly-sampled pole around (0, 0, -1) is filled by clamping the probe
    radius along the same azimuth (nearest-valid-angle replication).
    """
    if model != "orthographic":
        raise InvalidInputError(f"unsupported probe camera model: {model!r}")
    probe = np.asarray(probe, dtype=np.float32)
    if probe.ndim != 3 or probe.shape[2] != 3 or probe.shape[0] != probe.shape[1]:
        raise InvalidInputError(f"probe must be a square (S, S, 3) image, got {probe.shape}")
    s = probe.shape[0]
    uu, vv = _pixel_grid(out_h, out_w)
    theta = np.pi * vv
    phi = 2.0 * np.pi * (uu - 0.5)
    d = np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1
    )
    half = d + np.array([0.0, 0.0, 1.0])
    hn = np.linalg.norm(half, axis=-1, keepdims=True)
    # d == (0,0,-1) gives a zero half-vector; the radius clamp below fills it.
    n = half / np.maximum(hn, 1e-12)
    px = n[..., 0]
    py = n[..., 1]
    r = np.hypot(px, py)
    r_max = 1.0 - 1.0 / s  # stay a pixel inside the silhouette
    scale = np.where(r > r_max, r_max / np.maximum(r, 1e-12), 1.0)
    px = px * scale
    py = py * scale
    # probe rows run top-to-bottom; +y is up
    ix = (px + 1.0) * 0.5 * s - 0.5
    iy = (1.0 - (py + 1.0) * 0.5) * s - 0.5
    x0 = np.clip(np.floor(ix).astype(np.int64), 0, s - 1)
    y0 = np.clip(np.floor(iy).astype(np.int64), 0, s - 1)
    x1 = np.clip(x0 + 1, 0, s - 1)
    y1 = np.clip(y0 + 1, 0, s - 1)
    fx = np.clip(ix - x0, 0.0, 1.0)[..., None]
    fy = np.clip(iy - y0, 0.0, 1.0)[..., None]
    top = probe[y0, x0] * (1 - fx) + probe[y0, x1] * fx
    bot = probe[y1, x0] * (1 - fx) + probe[y1, x1] * fx
    pixels = top * (1 - fy) + bot * fy
    return EnvironmentMap(pixels=np.maximum(pixels, 0.0))


# ---------------------------------------------------------------------------
# procedural environments (stand-in for an HDRI collection)


def random_environment(seed, h=16, w=32):
    """Deterministic procedural HDR environment: dim ambient + sharp lobes.

    Lobes are von-Mises-Fisher-like bumps with random direction, sharpness,
    chroma and intensity. Ambient is kept low and the dominant lobe sharp so
    two independent draws light a scene very differently (hard, moving
    shadows rather than a global color shift).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x454E56]))
    uu, vv = _pixel_grid(h, w)
    theta = np.pi * vv
    phi = 2.0 * np.pi * (uu - 0.5)
    d = np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1
    )
    ambient = rng.uniform(0.02, 0.10, size=3) * rng.uniform(0.5, 1.5)
    pixels = np.broadcast_to(ambient, (h, w, 3)).astype(np.float64).copy()
    # gentle sky/ground gradient
    grad = 0.5 * (d[..., 1] + 1.0)
    pixels *= (0.6 + 0.8 * grad)[..., None]
    # two lobes with complementary hues at separated azimuths: shadows from
    # one lobe get filled by the other's color, a spatially varying chroma
    # that the per-channel evaluation scaling cannot absorb
    color_a = rng.uniform(0.25, 1.0, size=3)
    color_a /= color_a.max()
    color_b = 1.05 - color_a
    color_b /= color_b.max()
    az_a = rng.uniform(0.0, 2 * np.pi)
    az_b = az_a + rng.uniform(0.45, 0.55) * 2 * np.pi
    for axis_az, color, lobe in ((az_a, color_a, 0), (az_b, color_b, 1)):
        elev = rng.uniform(0.35, 1.1)  # radians above horizon
        axis = np.array(
            [np.cos(elev) * np.sin(axis_az), np.sin(elev), -np.cos(elev) * np.cos(axis_az)]
        )
        kappa = rng.uniform(18.0, 60.0) if lobe == 0 else rng.uniform(10.0, 40.0)
        intensity = rng.uniform(8.0, 28.0) if lobe == 0 else rng.uniform(4.0, 14.0)
        pixels += intensity * color * np.exp(kappa * (d @ axis - 1.0))[..., None]
    return EnvironmentMap(pixels=pixels.astype(np.float32))
