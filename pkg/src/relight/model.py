"""Joint denoising transformer over concatenated video-latent clips.

Three latent clips (relit target, albedo target, input condition) are
concatenated along the token axis and attended jointly. Per token the
channels are, in order:

    [z (C) | z-mask (1) | ldr (C) | mask (1) | log (C) | mask (1) |
     dir (C) | mask (1) | type embedding (3)]

so the token width is 4*(C+1) + 3 (71 for C=16). Lighting blocks are
zero-padded placeholders on the albedo and input clips. All three clips
share the same (frame, row, col) rotary phases -- tokens at equal
coordinates are distinguished only by the learnable type-embedding
channels. Noise-level conditioning enters through adaptive-layernorm
modulation (shift/scale/gate per sub-block) from a sinusoidal embedding;
modulation and the output head are zero-initialized so an untrained
network is the identity-on-skip denoiser.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CLIP_RELIT, CLIP_ALBEDO, CLIP_INPUT = 0, 1, 2

CHECKPOINT_MAGIC = b"RLM1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    latent_channels: int  # C of every latent clip
    width: int = 128
    depth: int = 4
    heads: int = 4
    type_emb_channels: int = 3
    n_clip_types: int = 3
    mlp_ratio: int = 4
    rope_base: float = 10000.0
    joint: bool = True  # False: relight-only ablation (albedo clip removed)

    def __post_init__(self):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if (self.width // self.heads) % 2:
            raise ValueError("head dim must be even (rotary pairs)")

    @property
    def token_channels(self):
        """4*(C+1) + C_emb; the appendix-style channel identity."""
        return 4 * (self.latent_channels + 1) + self.type_emb_channels

    @property
    def head_dim(self):
        return self.width // self.heads

    @property
    def clip_types(self):
        return (CLIP_RELIT, CLIP_ALBEDO, CLIP_INPUT) if self.joint else (CLIP_RELIT, CLIP_INPUT)


def _param_shapes(cfg: ModelConfig):
    d = cfg.width
    c = cfg.latent_channels
    hidden = cfg.mlp_ratio * d
    shapes = {
        "type_emb": (cfg.n_clip_types, cfg.type_emb_channels),
        "patch.w": (cfg.token_channels, d),
        "patch.b": (d,),
        "sigma.w1": (d, d),
        "sigma.b1": (d,),
        "sigma.w2": (d, d),
        "sigma.b2": (d,),
    }
    for i in range(cfg.depth):
        shapes[f"block{i}.mod.w"] = (d, 6 * d)
        shapes[f"block{i}.mod.b"] = (6 * d,)
        shapes[f"block{i}.qkv.w"] = (d, 3 * d)
        shapes[f"block{i}.qkv.b"] = (3 * d,)
        shapes[f"block{i}.out.w"] = (d, d)
        shapes[f"block{i}.out.b"] = (d,)
        shapes[f"block{i}.mlp.w1"] = (d, hidden)
        shapes[f"block{i}.mlp.b1"] = (hidden,)
        shapes[f"block{i}.mlp.w2"] = (hidden, d)
        shapes[f"block{i}.mlp.b2"] = (d,)
    shapes["final.mod.w"] = (d, 2 * d)
    shapes["final.mod.b"] = (2 * d,)
    shapes["head.w"] = (d, c)
    shapes["head.b"] = (c,)
    return shapes


def param_count(cfg: ModelConfig):
    return sum(int(np.prod(s)) for s in _param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed, dtype=np.float32, init="training"):
    """Deterministic-in-seed parameters.

    "training": truncated-normal weights, zero biases, zero-initialized
    modulation and output head (so the raw network output is exactly 0).
    "random": every tensor nonzero, for gradient checks with no dead paths.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1217]))
    params = {}
    for name, shape in _param_shapes(cfg).items():
        std = 0.02
        fan_in = shape[0] if len(shape) == 2 else 0
        if len(shape) == 2 and fan_in > 0:
            std = 1.0 / math.sqrt(fan_in)
        if init == "training":
            if name.endswith(".b") or ".mod." in name or name.startswith("head."):
                data = np.zeros(shape, dtype=dtype)
            elif name == "type_emb":
                data = (rng.normal(size=shape) * 0.02).astype(dtype)
            else:
                data = np.clip(rng.normal(size=shape) * std, -2 * std, 2 * std).astype(dtype)
        elif init == "random":
            data = np.clip(rng.normal(size=shape) * max(std, 0.05), -0.4, 0.4).astype(dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# channel assembly


@dataclass
class ConditionMasks:
    """Per-frame condition bits per clip (1 = clean conditioning frame).

    lighting_present holds the three per-buffer presence bits (ldr, log, dir).
    """

    relit: np.ndarray
    input: np.ndarray
    albedo: np.ndarray = None
    lighting_present: tuple = (1, 1, 1)


@dataclass
class JointTokenBatch:
    tokens: Tensor  # (B, T, D_in); graph-connected to the type embedding
    coords: np.ndarray  # (T, 3) int (frame, row, col); identical across clips
    clip_slices: dict  # clip type -> slice into the token axis
    cond_masks: dict  # clip type -> (B, n_tokens) float condition bits
    latent_shape: tuple  # (l, h, w, C)

    @property
    def n_tokens(self):
        return self.tokens.data.shape[1]


def _clip_coords(l, h, w):
    f, r, c = np.meshgrid(np.arange(l), np.arange(h), np.arange(w), indexing="ij")
    return np.stack([f.ravel(), r.ravel(), c.ravel()], axis=1)


def _frame_mask_to_tokens(mask, l, h, w, batch):
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 0:
        mask = np.full((batch, l), float(mask))
    elif mask.ndim == 1:
        mask = np.broadcast_to(mask, (batch, l))
    return np.repeat(mask, h * w, axis=1)  # (B, l*h*w)


def assemble_joint_input(
    z_relit,
    z_albedo,
    z_input,
    lighting,
    masks: ConditionMasks,
    type_emb: Tensor,
    cfg: ModelConfig,
) -> JointTokenBatch:
    """Concatenate the clips along the token (temporal) axis.

    z_* are (B, l, h, w, C) latents (z_albedo is None for the relight-only
    ablation); `lighting` is a triple of same-shape latents or None. Absent
    lighting contributes zero blocks with presence bits 0.
    """
    z_relit = np.asarray(z_relit)
    if z_relit.ndim != 5:
        raise ValueError(f"expected (B, l, h, w, C) latents, got {z_relit.shape}")
    b, l, h, w, c = z_relit.shape
    if c != cfg.latent_channels:
        raise ValueError(f"latent C={c} but model expects {cfg.latent_channels}")
    dtype = z_relit.dtype

    clips = [(CLIP_RELIT, z_relit, masks.relit)]
    if cfg.joint:
        if z_albedo is None:
            raise ValueError("joint model needs an albedo clip")
        clips.append((CLIP_ALBEDO, np.asarray(z_albedo), masks.albedo))
    clips.append((CLIP_INPUT, np.asarray(z_input), masks.input))

    if lighting is not None:
        lighting = [np.asarray(li) for li in lighting]
        if len(lighting) != 3:
            raise ValueError("lighting must be a (ldr, log, dir) latent triple")
        for li in lighting:
            if li.shape != z_relit.shape:
                raise ValueError(f"lighting latent shape {li.shape} != {z_relit.shape}")
        presence = tuple(masks.lighting_present)
    else:
        presence = (0, 0, 0)

    n_tok = l * h * w
    const_parts = []
    cond_masks = {}
    for clip_type, z, mask in clips:
        if z.shape != z_relit.shape:
            raise ValueError(f"clip shape {z.shape} != {z_relit.shape}")
        if mask is None:
            raise ValueError(f"missing condition mask for clip {clip_type}")
        tok_mask = _frame_mask_to_tokens(mask, l, h, w, b)
        cond_masks[clip_type] = tok_mask
        feats = [z.reshape(b, n_tok, c), tok_mask[..., None].astype(dtype)]
        for buf in range(3):
            if clip_type == CLIP_RELIT and lighting is not None:
                feats.append(lighting[buf].reshape(b, n_tok, c))
                feats.append(np.full((b, n_tok, 1), presence[buf], dtype=dtype))
            else:
                feats.append(np.zeros((b, n_tok, c), dtype=dtype))
                feats.append(np.zeros((b, n_tok, 1), dtype=dtype))
        const_parts.append(np.concatenate(feats, axis=2))
    const = Tensor(np.concatenate(const_parts, axis=1).astype(dtype))

    emb_rows = []
    for clip_type, _, _ in clips:
        row = ad.getitem(type_emb, (slice(clip_type, clip_type + 1), slice(None)))
        emb_rows.append(ad.broadcast_to(ad.reshape(row, (1, 1, cfg.type_emb_channels)), (b, n_tok, cfg.type_emb_channels)))
    emb_block = ad.concat(emb_rows, axis=1)
    tokens = ad.concat([const, emb_block], axis=2)

    coords = _clip_coords(l, h, w)
    slices = {
        clip_type: slice(i * n_tok, (i + 1) * n_tok) for i, (clip_type, _, _) in enumerate(clips)
    }
    return JointTokenBatch(
        tokens=tokens,
        coords=coords,
        clip_slices=slices,
        cond_masks=cond_masks,
        latent_shape=(l, h, w, c),
    )


# ---------------------------------------------------------------------------
# rotary position embedding, 3-D factorized over (frame, row, col)


def _rope_group_sizes(head_dim):
    g = 2 * (head_dim // 6)
    return (g, g, head_dim - 2 * g)  # remainder goes to the column axis


_ROPE_CACHE = {}


def rope_tables(coords, head_dim, base, n_clips, dtype):
    """(cos, gathered-sign*sin, permutation) tables of shape (T_total, head_dim)."""
    key = (coords.shape[0], coords.tobytes(), head_dim, base, n_clips, np.dtype(dtype).str)
    hit = _ROPE_CACHE.get(key)
    if hit is not None:
        return hit
    groups = _rope_group_sizes(head_dim)
    cos_parts, sin_parts, perm_parts, sign_parts = [], [], [], []
    offset = 0
    for axis, g in enumerate(groups):
        half = g // 2
        freqs = base ** (-2.0 * np.arange(half) / g)
        ang = coords[:, axis : axis + 1].astype(np.float64) * freqs[None, :]
        cos = np.cos(ang)
        sin = np.sin(ang)
        cos_parts.append(np.concatenate([cos, cos], axis=1))
        sin_parts.append(np.concatenate([sin, sin], axis=1))
        # rotate-half within the group: (x1, x2) -> (-x2, x1)
        perm = np.concatenate([np.arange(half, g), np.arange(0, half)]) + offset
        sign = np.concatenate([-np.ones(half), np.ones(half)])
        perm_parts.append(perm)
        sign_parts.append(sign)
        offset += g
    cos_t = np.tile(np.concatenate(cos_parts, axis=1), (n_clips, 1)).astype(dtype)
    sin_t = np.tile(np.concatenate(sin_parts, axis=1), (n_clips, 1)).astype(dtype)
    perm = np.concatenate(perm_parts).astype(np.int64)
    sign_sin = sin_t * np.concatenate(sign_parts).astype(dtype)[None, :]
    out = (cos_t, sign_sin, perm)
    _ROPE_CACHE[key] = out
    return out


def apply_rope(x: Tensor, cos_t, sign_sin, perm):
    """x: (B, H, T, head_dim). Orthogonal per-token rotation of channel pairs."""
    rotated = ad.getitem(x, (Ellipsis, perm))
    return ad.add(ad.mul(x, cos_t), ad.mul(rotated, sign_sin))


# ---------------------------------------------------------------------------
# forward


def _sigma_fourier(sigma, width, dtype):
    """Sinusoidal embedding of c_noise = ln(sigma)/4."""
    c_noise = np.log(np.asarray(sigma, dtype=np.float64)) / 4.0
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = c_noise[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if emb.shape[1] < width:
        emb = np.pad(emb, ((0, 0), (0, width - emb.shape[1])))
    return emb.astype(dtype)


def _modulate(h, shift, scale):
    return ad.add(ad.mul(h, ad.add(scale, 1.0)), shift)


def forward(batch: JointTokenBatch, sigma, params, cfg: ModelConfig, collect_attn=None):
    """Raw network output F per token, (B, T, C).

    Output is defined for every token; the denoiser consumes only the
    relit/albedo slots. `collect_attn`, if a list, receives per-block
    attention matrices (numpy) for inspection.
    """
    tokens = batch.tokens
    if not np.isfinite(tokens.data).all():
        raise ValueError("non-finite values in assembled token batch")
    b, t, _ = tokens.data.shape
    dtype = tokens.data.dtype
    sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
    if sigma.shape == (1,) and b > 1:
        sigma = np.repeat(sigma, b)
    if sigma.shape != (b,):
        raise ValueError(f"sigma shape {sigma.shape} != batch {b}")

    four = Tensor(_sigma_fourier(sigma, cfg.width, dtype))
    e = ad.linear(ad.silu(ad.linear(four, params["sigma.w1"], params["sigma.b1"])),
                  params["sigma.w2"], params["sigma.b2"])
    e_act = ad.silu(e)  # (B, D)

    x = ad.linear(tokens, params["patch.w"], params["patch.b"])  # (B, T, D)
    cos_t, sign_sin, perm = rope_tables(
        batch.coords, cfg.head_dim, cfg.rope_base, len(batch.clip_slices), dtype
    )

    d = cfg.width
    for i in range(cfg.depth):
        mod = ad.linear(e_act, params[f"block{i}.mod.w"], params[f"block{i}.mod.b"])
        mod = ad.reshape(mod, (b, 1, 6, d))
        sh1, sc1, g1, sh2, sc2, g2 = (
            ad.getitem(mod, (slice(None), slice(None), j, slice(None))) for j in range(6)
        )
        h = _modulate(ad.layernorm(x), sh1, sc1)
        qkv = ad.linear(h, params[f"block{i}.qkv.w"], params[f"block{i}.qkv.b"])
        qkv = ad.transpose(ad.reshape(qkv, (b, t, 3, cfg.heads, cfg.head_dim)), (2, 0, 3, 1, 4))
        q = apply_rope(ad.getitem(qkv, (0,)), cos_t, sign_sin, perm)
        k = apply_rope(ad.getitem(qkv, (1,)), cos_t, sign_sin, perm)
        v = ad.getitem(qkv, (2,))
        if collect_attn is not None:
            collect_attn.append(ad.attention_probs(q.data, k.data))
        att = ad.attention(q, k, v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, t, d))
        x = ad.add(x, ad.mul(g1, ad.linear(att, params[f"block{i}.out.w"], params[f"block{i}.out.b"])))
        h2 = _modulate(ad.layernorm(x), sh2, sc2)
        m = ad.linear(
            ad.gelu(ad.linear(h2, params[f"block{i}.mlp.w1"], params[f"block{i}.mlp.b1"])),
            params[f"block{i}.mlp.w2"],
            params[f"block{i}.mlp.b2"],
        )
        x = ad.add(x, ad.mul(g2, m))

    fm = ad.reshape(ad.linear(e_act, params["final.mod.w"], params["final.mod.b"]), (b, 1, 2, d))
    sh = ad.getitem(fm, (slice(None), slice(None), 0, slice(None)))
    sc = ad.getitem(fm, (slice(None), slice(None), 1, slice(None)))
    h = _modulate(ad.layernorm(x), sh, sc)
    return ad.linear(h, params["head.w"], params["head.b"])


def backward(batch: JointTokenBatch, sigma, params, cfg, cotangent):
    """Exact reverse-mode gradients of `forward`.

    Returns ({param name: grad array}, input-token gradients).
    """
    tokens = Tensor(batch.tokens.data, requires_grad=True)
    graph_batch = JointTokenBatch(
        tokens=tokens,
        coords=batch.coords,
        clip_slices=batch.clip_slices,
        cond_masks=batch.cond_masks,
        latent_shape=batch.latent_shape,
    )
    out = forward(graph_batch, sigma, params, cfg)
    ad.zero_grads(params.values())
    ad.backward(out, cotangent)
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    in_grad = tokens.grad if tokens.grad is not None else np.zeros_like(tokens.data)
    return grads, in_grad


# ---------------------------------------------------------------------------
# checkpoints: magic, version, JSON config echo, named tensors in order


def save_checkpoint(path, params, cfg: ModelConfig, extra=None, extra_tensors=None):
    meta = {"model": asdict(cfg), "extra": extra or {}}
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += CHECKPOINT_VERSION.to_bytes(4, "little")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    blob += len(meta_bytes).to_bytes(4, "little")
    blob += meta_bytes
    items = [(name, p.data) for name, p in params.items()]
    for name, arr in extra_tensors or []:
        items.append((name, arr))
    for name, arr in items:
        name_b = name.encode("utf-8")
        blob += len(name_b).to_bytes(2, "little")
        blob += name_b
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        blob += bytes([arr.ndim])
        for dim in arr.shape:
            blob += int(dim).to_bytes(4, "little")
        blob += arr.astype("<f4").tobytes()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(bytes(blob))
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (params dict, ModelConfig, meta extra, other named tensors)."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise IOError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    version = int.from_bytes(raw[4:8], "little")
    if version != CHECKPOINT_VERSION:
        raise IOError(f"{path}: unsupported checkpoint version {version}")
    meta_len = int.from_bytes(raw[8:12], "little")
    meta = json.loads(raw[12 : 12 + meta_len].decode("utf-8"))
    off = 12 + meta_len
    tensors = {}
    while off < len(raw):
        name_len = int.from_bytes(raw[off : off + 2], "little")
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        rank = raw[off]
        off += 1
        dims = []
        for _ in range(rank):
            dims.append(int.from_bytes(raw[off : off + 4], "little"))
            off += 4
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        tensors[name] = np.frombuffer(raw[off : off + 4 * count], dtype="<f4").reshape(dims).copy()
        off += 4 * count
    cfg = ModelConfig(**meta["model"])
    shapes = _param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in tensors:
            raise IOError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise IOError(f"{path}: tensor {name} has shape {tensors[name].shape}, want {shape}")
        params[name] = Tensor(tensors.pop(name), requires_grad=True)
    return params, cfg, meta.get("extra", {}), tensors
