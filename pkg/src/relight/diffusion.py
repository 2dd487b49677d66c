"""Variance-exploding diffusion machinery around the joint denoiser.

Noise model: z_tau = z_0 + sigma * eps (alpha == 1). Preconditioning,
training-sigma law, loss weight and the rho-spaced sampler grid follow the
"elucidated" defaults (sigma_data 0.5, sigma in [0.002, 80], rho 7,
ln sigma ~ N(-1.2, 1.2^2)); the deterministic sampler is 2nd-order Heun.

Preconditioning applies only to noisy target-slot latent channels;
condition channels (masks, lighting, clean latents) pass through unscaled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import model as mdl
from .autodiff import Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    p_mean: float = -1.2
    p_std: float = 1.2
    sigma_data: float = 0.5

    def __post_init__(self):
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")


@dataclass
class SamplerConfig:
    steps: int = 35
    guidance_scale: float = 1.0  # 1 = off
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")


def sample_sigma(rng, schedule: NoiseSchedule, size=None):
    """Training noise level: ln sigma ~ Normal(p_mean, p_std^2)."""
    return np.exp(schedule.p_mean + schedule.p_std * rng.standard_normal(size))


def add_noise(z0, sigma, eps):
    """z0 + sigma * eps, broadcasting sigma over trailing dims."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    sigma = np.asarray(sigma, dtype=z0.dtype)
    if sigma.ndim == 1:
        sigma = sigma.reshape((-1,) + (1,) * (z0.ndim - 1))
    return z0 + sigma * eps


def precond_coeffs(sigma, schedule: NoiseSchedule):
    """(c_skip, c_out, c_in, c_noise) per the preconditioned denoiser."""
    sigma = np.asarray(sigma, dtype=np.float64)
    sd2 = schedule.sigma_data**2
    tot = sigma**2 + sd2
    c_skip = sd2 / tot
    c_out = sigma * schedule.sigma_data / np.sqrt(tot)
    c_in = 1.0 / np.sqrt(tot)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, schedule: NoiseSchedule):
    """w(sigma) = (sigma^2 + sigma_d^2) / (sigma * sigma_d)^2; w * c_out^2 == 1."""
    sigma = np.asarray(sigma, dtype=np.float64)
    return (sigma**2 + schedule.sigma_data**2) / (sigma * schedule.sigma_data) ** 2


@dataclass
class NoiseState:
    """One noising event: z_tau = z0 + sigma * eps plus the coefficients."""

    sigma: float
    eps: np.ndarray
    z_tau: np.ndarray
    c_skip: float
    c_out: float
    c_in: float
    c_noise: float


def make_noise_state(z0, sigma, eps, schedule: NoiseSchedule) -> NoiseState:
    c_skip, c_out, c_in, c_noise = precond_coeffs(sigma, schedule)
    return NoiseState(
        sigma=float(sigma),
        eps=eps,
        z_tau=add_noise(z0, sigma, eps),
        c_skip=float(c_skip),
        c_out=float(c_out),
        c_in=float(c_in),
        c_noise=float(c_noise),
    )


def karras_sigma_steps(schedule: NoiseSchedule, n):
    """Strictly decreasing rho-spaced sigma grid with a final 0 appended."""
    if n < 1:
        raise ValueError("need n >= 1")
    if n == 1:
        return np.array([schedule.sigma_max, 0.0])
    inv_rho = 1.0 / schedule.rho
    i = np.arange(n)
    sig = (
        schedule.sigma_max**inv_rho
        + i / (n - 1) * (schedule.sigma_min**inv_rho - schedule.sigma_max**inv_rho)
    ) ** schedule.rho
    return np.concatenate([sig, [0.0]])


# ---------------------------------------------------------------------------
# denoiser wrapper over the joint transformer


@dataclass
class DenoiserInputs:
    """Everything one denoiser evaluation needs, in latent space.

    Exactly one of albedo_noisy / albedo_clean is set for a joint model
    (noisy = denoising target, clean = conditioning); both stay None for the
    relight-only ablation. input_latent None means the input clip is
    dropped (zero content, zero mask). sigma is (B,).
    """

    relit_noisy: np.ndarray
    sigma: np.ndarray
    input_latent: np.ndarray = None
    lighting: tuple = None  # (ldr, log, dir) latents
    albedo_noisy: np.ndarray = None
    albedo_clean: np.ndarray = None


def drop_conditions(inputs: DenoiserInputs) -> DenoiserInputs:
    """Zero every conditioning signal (the CFG unconditional branch).

    Matches the training-time Dropped override: input clip dropped,
    lighting absent, and a clean albedo condition (if any) zeroed.
    """
    return replace(
        inputs,
        input_latent=None,
        lighting=None,
        albedo_clean=None if inputs.albedo_clean is None else np.zeros_like(inputs.albedo_clean),
    )


def denoise(params, cfg: mdl.ModelConfig, schedule: NoiseSchedule, inputs: DenoiserInputs):
    """Preconditioned denoiser D(x; sigma) for the relit / albedo slots.

    Returns (d_relit, d_albedo, batch); entries are autodiff Tensors
    (d_albedo is None when the albedo slot is absent or conditioning).
    """
    z_r = np.asarray(inputs.relit_noisy)
    b, l, h, w, c = z_r.shape
    dtype = z_r.dtype
    sigma = np.atleast_1d(np.asarray(inputs.sigma, dtype=np.float64))
    if sigma.shape != (b,):
        raise ValueError(f"sigma shape {sigma.shape} != ({b},)")
    c_skip, c_out, c_in, _ = precond_coeffs(sigma, schedule)
    scale = lambda coef: coef.reshape(b, 1, 1, 1, 1).astype(dtype)

    relit_slot = z_r * scale(c_in)
    if inputs.albedo_noisy is not None and inputs.albedo_clean is not None:
        raise ValueError("albedo cannot be both target and condition")
    if cfg.joint:
        if inputs.albedo_noisy is not None:
            albedo_slot = np.asarray(inputs.albedo_noisy) * scale(c_in)
            albedo_mask = np.zeros(l)
        elif inputs.albedo_clean is not None:
            albedo_slot = np.asarray(inputs.albedo_clean)  # conditioning: unscaled
            albedo_mask = np.ones(l)
        else:
            raise ValueError("joint model needs albedo_noisy or albedo_clean")
    else:
        if inputs.albedo_noisy is not None or inputs.albedo_clean is not None:
            raise ValueError("ablation model has no albedo slot")
        albedo_slot = None
        albedo_mask = None

    if inputs.input_latent is not None:
        input_slot = np.asarray(inputs.input_latent)
        input_mask = np.ones(l)
    else:
        input_slot = np.zeros_like(z_r)
        input_mask = np.zeros(l)

    masks = mdl.ConditionMasks(
        relit=np.zeros(l),
        albedo=albedo_mask,
        input=input_mask,
        lighting_present=(1, 1, 1) if inputs.lighting is not None else (0, 0, 0),
    )
    batch = mdl.assemble_joint_input(
        relit_slot, albedo_slot, input_slot, inputs.lighting, masks, params["type_emb"], cfg
    )
    f_out = mdl.forward(batch, sigma, params, cfg)

    def slot_pred(clip, noisy):
        sl = batch.clip_slices[clip]
        f_slot = ad.getitem(f_out, (slice(None), sl, slice(None)))
        f_slot = ad.reshape(f_slot, (b, l, h, w, c))
        skip = Tensor((np.asarray(noisy) * scale(c_skip)).astype(dtype))
        return ad.add(skip, ad.mul(f_slot, Tensor(scale(c_out))))

    d_relit = slot_pred(mdl.CLIP_RELIT, z_r)
    d_albedo = None
    if cfg.joint and inputs.albedo_noisy is not None:
        d_albedo = slot_pred(mdl.CLIP_ALBEDO, inputs.albedo_noisy)
    return d_relit, d_albedo, batch


def dsm_loss(
    pred_relit,
    pred_albedo,
    z0_relit,
    z0_albedo,
    sigma,
    lambda_albedo,
    schedule: NoiseSchedule,
    relit_loss_mask=None,
    albedo_loss_mask=None,
):
    """w(sigma) * (mean ||relit err||^2 + lambda_a * mean ||albedo err||^2).

    Loss masks are per-frame weights in {0,1}; frames with weight 0
    (conditioning frames) are excluded from the means. Returns a scalar
    Tensor (mean over the batch).
    """
    z0_relit = np.asarray(z0_relit)
    b, l = z0_relit.shape[:2]
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    w_sig = loss_weight(sigma, schedule)

    def masked_term(pred, z0, mask):
        if mask is None:
            mask = np.ones((b, l))
        mask = np.broadcast_to(np.asarray(mask, dtype=np.float64), (b, l))
        per_frame = z0[0, 0].size
        counts = mask.sum(axis=1) * per_frame  # elements per sample
        inv = np.where(counts > 0, 1.0 / np.maximum(counts, 1), 0.0)
        diff = ad.sub(pred, Tensor(z0))
        sq = ad.mul(diff, diff)
        weights = mask.reshape(b, l, 1, 1, 1).astype(z0.dtype)
        per_sample = ad.sum_(ad.mul(sq, Tensor(weights)), axis=(1, 2, 3, 4))
        return ad.mul(per_sample, Tensor(inv.astype(z0.dtype)))

    total = masked_term(pred_relit, z0_relit, relit_loss_mask)
    if pred_albedo is not None:
        albedo_term = masked_term(pred_albedo, np.asarray(z0_albedo), albedo_loss_mask)
        total = ad.add(total, ad.mul(albedo_term, float(lambda_albedo)))
    total = ad.mul(total, Tensor(w_sig.astype(z0_relit.dtype)))
    return ad.mean(total)


# ---------------------------------------------------------------------------
# deterministic Heun sampler


def integrate_heun(denoise_fn, x_init, sigmas):
    """2nd-order deterministic ODE integration over a decreasing sigma grid.

    denoise_fn(x, sigma_scalar) -> D(x; sigma), numpy in and out.
    """
    x = np.asarray(x_init).copy()
    sigmas = np.asarray(sigmas, dtype=np.float64)
    for i in range(len(sigmas) - 1):
        s, s_next = sigmas[i], sigmas[i + 1]
        d = (x - denoise_fn(x, s)) / s
        x_next = x + (s_next - s) * d
        if s_next > 0:
            d2 = (x_next - denoise_fn(x_next, s_next)) / s_next
            x_next = x + (s_next - s) * 0.5 * (d + d2)
        if not np.isfinite(x_next).all():
            raise RuntimeError(
                f"sampler produced non-finite values at step {i} (sigma {s:.4g} -> {s_next:.4g})"
            )
        x = x_next
    return x


def initial_noise(shape, seed, batch):
    """Counter-based per-element noise: element e uses SeedSequence((seed, e))."""
    eps = np.empty((batch,) + tuple(shape), dtype=np.float64)
    for e in range(batch):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), e, 0xA11CE]))
        eps[e] = rng.standard_normal(shape)
    return eps


def sample(params, cfg: mdl.ModelConfig, schedule: NoiseSchedule, conditions: DenoiserInputs,
           sampler_cfg: SamplerConfig):
    """Sample the target slots given clean conditions.

    `conditions` supplies input/lighting/albedo-condition signals; its
    relit_noisy/albedo_noisy fields are ignored apart from shapes. Returns
    (z_relit, z_albedo) where z_albedo is None unless the albedo slot is a
    target. Condition slots stay clean throughout; guidance_scale != 1
    blends in a condition-dropped branch, and exactly 1 skips it bitwise.
    """
    shape = np.asarray(conditions.relit_noisy).shape
    b, l, h, w, c = shape
    joint_target = cfg.joint and conditions.albedo_clean is None
    n_slots = 2 if joint_target else 1
    eps = initial_noise((n_slots, l, h, w, c), sampler_cfg.seed, b)
    eps = np.moveaxis(eps, 1, 0).astype(np.float32)  # (n_slots, B, l, h, w, C)
    sigmas = karras_sigma_steps(schedule, sampler_cfg.steps)
    x0 = eps * sigmas[0]
    uncond = drop_conditions(conditions)

    def eval_branch(cond, x, sigma_val):
        sig = np.full(b, sigma_val)
        inp = replace(
            cond,
            relit_noisy=x[0],
            sigma=sig,
            albedo_noisy=x[1] if joint_target else None,
        )
        with ad.no_grad():
            d_relit, d_albedo, _ = denoise(params, cfg, schedule, inp)
        if joint_target:
            return np.stack([d_relit.data, d_albedo.data])
        return d_relit.data[None]

    def denoise_fn(x, sigma_val):
        d_c = eval_branch(conditions, x, sigma_val)
        if sampler_cfg.guidance_scale == 1.0:
            return d_c
        d_u = eval_branch(uncond, x, sigma_val)
        return d_u + sampler_cfg.guidance_scale * (d_c - d_u)

    out = integrate_heun(denoise_fn, x0, sigmas)
    z_relit = out[0]
    z_albedo = out[1] if joint_target else None
    return z_relit, z_albedo
