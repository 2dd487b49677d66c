"""Bit-exact file formats, dataset manifests, multi-illumination ingestion.

Interchange is linear-light float32 in a small self-describing container
(magic "RLT1"); PNG is only for previews. Environment maps travel as
Radiance RGBE (.hdr). All writes are atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .envlight import EnvironmentMap, chrome_probe_to_latlong, random_environment

MANIFEST_VERSION = 1
_TENSOR_MAGIC = b"RLT1"


class FormatError(IOError):
    """Malformed container, header, or directory layout."""


def data_root(cli_value=None) -> Path:
    """Dataset root: CLI flag wins, then RELIGHT_DATA_ROOT, then cwd."""
    if cli_value:
        return Path(cli_value)
    return Path(os.environ.get("RELIGHT_DATA_ROOT", "."))


def _atomic_write_bytes(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# tensor container


def write_tensor(path, tensor):
    """magic, u8 rank, u32-LE dims, u8 dtype tag (0 = f32), row-major f32 LE."""
    arr = np.ascontiguousarray(tensor, dtype=np.float32)
    if arr.ndim > 255:
        raise FormatError("rank too large")
    header = bytearray(_TENSOR_MAGIC)
    header.append(arr.ndim)
    for dim in arr.shape:
        header += int(dim).to_bytes(4, "little")
    header.append(0)
    _atomic_write_bytes(path, bytes(header) + arr.astype("<f4").tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    rank = raw[4]
    off = 5
    dims = []
    for _ in range(rank):
        dims.append(int.from_bytes(raw[off : off + 4], "little"))
        off += 4
    dtype_tag = raw[off]
    off += 1
    if dtype_tag != 0:
        raise FormatError(f"{path}: unknown dtype tag {dtype_tag}")
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    expected = count * 4
    payload = raw[off:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


# ---------------------------------------------------------------------------
# Radiance RGBE (.hdr)
# decode: (r+0.5, g+0.5, b+0.5) * 2**(e-136); e == 0 means black


def _rgbe_to_float(rgbe):
    rgbe = rgbe.astype(np.float64)
    e = rgbe[..., 3]
    scale = np.where(e > 0, np.exp2(e - 136.0), 0.0)
    return ((rgbe[..., :3] + 0.5) * scale[..., None]).astype(np.float32)


def _float_to_rgbe(rgb):
    rgb = np.maximum(np.asarray(rgb, dtype=np.float64), 0.0)
    m = rgb.max(axis=-1)
    out = np.zeros(rgb.shape[:-1] + (4,), dtype=np.uint8)
    nz = m >= 1e-32
    if nz.any():
        frac, exp = np.frexp(m[nz])  # m = frac * 2**exp, frac in [0.5, 1)
        scale = np.exp2(-exp.astype(np.float64)) * 256.0
        comp = np.clip(np.floor(rgb[nz] * scale[:, None]), 0, 255).astype(np.uint8)
        out[nz, :3] = comp
        out[nz, 3] = np.clip(exp + 128, 1, 255).astype(np.uint8)
    return out


def write_hdr_rgbe(path, env_or_pixels):
    """Write flat (non-RLE) scanlines; the reader accepts both."""
    pixels = env_or_pixels.pixels if isinstance(env_or_pixels, EnvironmentMap) else env_or_pixels
    pixels = np.asarray(pixels, dtype=np.float32)
    h, w = pixels.shape[:2]
    header = f"#?RADIANCE\nFORMAT=32-bit_rle_rgbe\n\n-Y {h} +X {w}\n".encode("ascii")
    body = _float_to_rgbe(pixels).tobytes()
    _atomic_write_bytes(path, header + body)


def read_hdr_rgbe(path) -> EnvironmentMap:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"#?"):
        raise FormatError(f"{path}: not a Radiance file")
    # header: lines until the blank line, then the resolution line
    pos = raw.find(b"\n\n")
    if pos < 0:
        raise FormatError(f"{path}: missing header terminator")
    res_end = raw.find(b"\n", pos + 2)
    res_line = raw[pos + 2 : res_end].decode("ascii").split()
    if len(res_line) != 4 or res_line[0] != "-Y" or res_line[2] != "+X":
        raise FormatError(f"{path}: unsupported resolution line {' '.join(res_line)!r}")
    h, w = int(res_line[1]), int(res_line[3])
    data = raw[res_end + 1 :]
    rgbe = np.empty((h, w, 4), dtype=np.uint8)
    off = 0
    for row in range(h):
        if off + 4 > len(data):
            raise FormatError(f"{path}: truncated at scanline {row}")
        head = data[off : off + 4]
        if head[0] == 2 and head[1] == 2 and ((head[2] << 8) | head[3]) == w and w >= 8:
            off += 4
            for ch in range(4):
                col = 0
                while col < w:
                    count = data[off]
                    off += 1
                    if count > 128:  # run
                        rgbe[row, col : col + count - 128, ch] = data[off]
                        off += 1
                        col += count - 128
                    else:  # literal
                        lit = np.frombuffer(data[off : off + count], dtype=np.uint8)
                        rgbe[row, col : col + count, ch] = lit
                        off += count
                        col += count
                if col != w:
                    raise FormatError(f"{path}: scanline {row} channel {ch} overrun")
        else:
            flat = np.frombuffer(data[off : off + 4 * w], dtype=np.uint8)
            if flat.size != 4 * w:
                raise FormatError(f"{path}: truncated flat scanline {row}")
            rgbe[row] = flat.reshape(w, 4)
            off += 4 * w
    return EnvironmentMap(pixels=_rgbe_to_float(rgbe))


# ---------------------------------------------------------------------------
# PNG previews


def write_png(path, img01):
    """8-bit preview of a [0,1] image (or one video frame)."""
    arr = np.clip(np.asarray(img01, dtype=np.float64), 0.0, 1.0)
    data = (arr * 255.0 + 0.5).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp.png")
    Image.fromarray(data).save(tmp, format="PNG")
    os.replace(tmp, path)


def read_png(path):
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


# ---------------------------------------------------------------------------
# manifests (JSON lines; header row carries the version; unknown fields kept)


def write_manifest(path, rows, version=MANIFEST_VERSION):
    lines = [json.dumps({"manifest_version": version})]
    lines += [json.dumps(row, sort_keys=True) for row in rows]
    _atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty manifest")
    header = json.loads(lines[0])
    version = header.get("manifest_version")
    if version is None:
        raise FormatError(f"{path}: missing manifest_version header")
    rows = [json.loads(ln) for ln in lines[1:]]
    return version, rows


@dataclass
class SampleTuple:
    """One training/eval sample: input + relit videos, albedo, lighting."""

    scene_id: str
    seed: int
    split: str  # train | test
    video_input: str
    video_relit: str
    albedo: str
    env: str  # HDR map path (the target illumination)
    yaw: list  # per-frame encoder yaw for `env`
    env_input: str = ""  # illumination of the input video (extra, kept)
    yaw_input: list = None
    coverage: str = ""

    def to_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict):
        known = {k: row[k] for k in cls.__dataclass_fields__ if k in row}
        return cls(**known)


# ---------------------------------------------------------------------------
# multi-illumination scenes (view_xx.png + probe_xx.hdr, 25 conditions)

MIT_CONDITIONS = 25


def mit_pairing(i: int) -> int:
    """Input condition i is paired with target condition (i + 12) mod 25."""
    return (i + 12) % MIT_CONDITIONS


@dataclass
class MultiIllumScene:
    scene_id: str
    images: list  # 25 arrays (H, W, 3) in [0,1]
    envs: list  # 25 EnvironmentMap


def load_multi_illum_scene(scene_dir, env_h=16, env_w=32) -> MultiIllumScene:
    scene_dir = Path(scene_dir)
    missing = []
    for i in range(MIT_CONDITIONS):
        if not (scene_dir / f"view_{i:02d}.png").exists():
            missing.append(f"view_{i:02d}.png")
        if not (scene_dir / f"probe_{i:02d}.hdr").exists():
            missing.append(f"probe_{i:02d}.hdr")
    if missing:
        raise FormatError(f"{scene_dir}: missing {', '.join(missing)}")
    images = [read_png(scene_dir / f"view_{i:02d}.png") for i in range(MIT_CONDITIONS)]
    envs = []
    for i in range(MIT_CONDITIONS):
        probe = read_hdr_rgbe(scene_dir / f"probe_{i:02d}.hdr")
        envs.append(chrome_probe_to_latlong(probe.pixels, env_h, env_w))
    return MultiIllumScene(scene_id=scene_dir.name, images=images, envs=envs)


# ---------------------------------------------------------------------------
# synthetic dataset generation


def _build_scene_sample(args):
    """Render one scene pair (runs in a worker process)."""
    from . import render as rd

    index, master_seed, split, cfg_dict, limits_dict, env_hw, out_dir = args
    cfg = rd.RenderConfig(**cfg_dict)
    limits = rd.SceneLimits(**limits_dict)
    seed_scene = int(
        np.random.SeedSequence([master_seed, index, 0x5EED]).generate_state(1)[0]
    )
    scene = rd.generate_scene(seed_scene, limits)
    env_a = random_environment(seed_scene * 2 + 0, *env_hw)
    env_b = random_environment(seed_scene * 2 + 1, *env_hw)
    cfg.seed = seed_scene
    pair = rd.render_pair(scene, env_a, env_b, cfg)

    scene_id = f"scene_{index:04d}"
    sdir = Path(out_dir) / scene_id
    write_tensor(sdir / "input.rlt", pair["input"])
    write_tensor(sdir / "relit.rlt", pair["relit"])
    write_tensor(sdir / "albedo.rlt", pair["albedo"])
    write_tensor(sdir / "coverage.rlt", pair["coverage"])
    write_hdr_rgbe(sdir / "env_a.hdr", env_a)
    write_hdr_rgbe(sdir / "env_b.hdr", env_b)
    row = SampleTuple(
        scene_id=scene_id,
        seed=seed_scene,
        split=split,
        video_input=f"{scene_id}/input.rlt",
        video_relit=f"{scene_id}/relit.rlt",
        albedo=f"{scene_id}/albedo.rlt",
        env=f"{scene_id}/env_b.hdr",
        yaw=[float(y) for y in pair["yaw_b"]],
        env_input=f"{scene_id}/env_a.hdr",
        yaw_input=[float(y) for y in pair["yaw_a"]],
        coverage=f"{scene_id}/coverage.rlt",
    ).to_row()
    row["cam_azimuth"] = [float(a) for a in pair["cam_azimuth"]]
    return index, row


def make_dataset(
    n_scenes,
    render_cfg,
    out_dir,
    master_seed=0,
    n_test=0,
    limits=None,
    env_hw=(16, 32),
    threads=1,
):
    """Generate scenes, render pairs, write tensors + a JSON-lines manifest.

    Deterministic in master_seed regardless of `threads` (each scene derives
    its own seed; the manifest is assembled in index order).
    """
    from . import render as rd

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    limits = limits or rd.SceneLimits()
    cfg_dict = asdict(render_cfg)
    limits_dict = asdict(limits)
    jobs = [
        (
            i,
            master_seed,
            "test" if i >= n_scenes - n_test else "train",
            cfg_dict,
            limits_dict,
            tuple(env_hw),
            str(out_dir),
        )
        for i in range(n_scenes)
    ]
    rows = [None] * n_scenes
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for index, row in pool.map(_build_scene_sample, jobs, chunksize=1):
                rows[index] = row
    else:
        for job in jobs:
            index, row = _build_scene_sample(job)
            rows[index] = row
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest_path, rows)
    return manifest_path
