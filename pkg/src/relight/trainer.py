"""Training: conditioning-mode scheduling, batch building, AdamW, stages.

Conditioning modes (drawn once per step, batch-wide):
  ALBEDO_ONLY       input dropped, GT albedo is the sole (clean) condition
  INPUT_PLUS_ALBEDO input video and GT albedo both clean conditions
  DEFAULT           input video condition; relit + albedo noised targets
  REAL_AUTO_LABELED lighting zeroed, albedo condition, RGB video as target
  DROPPED           every condition zeroed (classifier-free-guidance prep)

Paired sources draw (0.12, 0.18, 0.70) over the first three; real sources
always get REAL_AUTO_LABELED; afterwards a 10% dropout overrides to
DROPPED. All randomness comes from one generator in a fixed per-step
order, so runs (and checkpoint resumes) are bit-reproducible. Batches are
prepared by a producer thread one step ahead and handed over through a
bounded queue; preparation is a pure function of the pre-drawn plan, so
prefetching never changes results.
"""

from __future__ import annotations

import csv
import json
import queue
import threading
from dataclasses import dataclass, field, asdict
from enum import Enum
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import diffusion as dif
from . import model as mdl
from . import tokenizer as tok
from .envlight import EnvironmentMap, encode_lighting, reinhard_tonemap


class ConditioningMode(Enum):
    ALBEDO_ONLY = "albedo_only"
    INPUT_PLUS_ALBEDO = "input_plus_albedo"
    DEFAULT = "default"
    REAL_AUTO_LABELED = "real_auto_labeled"
    DROPPED = "dropped"


PAIRED_MODES = (
    ConditioningMode.ALBEDO_ONLY,
    ConditioningMode.INPUT_PLUS_ALBEDO,
    ConditioningMode.DEFAULT,
)


def draw_mode(rng, source_kind, mode_probs=(0.12, 0.18, 0.70), dropout_prob=0.10):
    """Mode for one training step; `source_kind` is 'paired' or 'real'."""
    if source_kind == "paired":
        mode = PAIRED_MODES[rng.choice(3, p=np.asarray(mode_probs))]
    elif source_kind == "real":
        mode = ConditioningMode.REAL_AUTO_LABELED
    else:
        raise ValueError(f"unknown source kind {source_kind!r}")
    if rng.random() < dropout_prob:
        return ConditioningMode.DROPPED
    return mode


# ---------------------------------------------------------------------------
# data sources


@dataclass
class TrainingSample:
    """Pixel-space sample; videos are (L, H, W, 3) in [0, 1]."""

    relit: np.ndarray  # denoising target for the relit slot
    albedo: np.ndarray
    input: np.ndarray = None  # None for real auto-labeled data
    env: EnvironmentMap = None
    yaw: np.ndarray = None


class PairedVideoSource:
    """Full tuples (input, relit, albedo, env); both pair directions count."""

    kind = "paired"

    def __init__(self, samples):
        if not samples:
            raise ValueError("empty source")
        self.samples = samples

    def draw(self, rng, n):
        idx = rng.integers(0, len(self.samples), size=n)
        return [self.samples[i] for i in idx]


class ImageSource:
    """Single frames sampled from a paired video source."""

    kind = "paired"

    def __init__(self, video_source: PairedVideoSource):
        self.base = video_source

    def draw(self, rng, n):
        vids = self.base.draw(rng, n)
        out = []
        for s in vids:
            k = int(rng.integers(0, s.relit.shape[0]))
            out.append(
                TrainingSample(
                    relit=s.relit[k : k + 1],
                    albedo=s.albedo[k : k + 1],
                    input=None if s.input is None else s.input[k : k + 1],
                    env=s.env,
                    yaw=None if s.yaw is None else s.yaw[k : k + 1],
                )
            )
        return out


class RealSource:
    """(video, albedo) pairs without lighting or a separate input video."""

    kind = "real"

    def __init__(self, samples):
        if not samples:
            raise ValueError("empty source")
        self.samples = samples

    def draw(self, rng, n):
        idx = rng.integers(0, len(self.samples), size=n)
        return [self.samples[i] for i in idx]


def load_manifest_source(manifest_path, root=None, split="train", flip_augment=False):
    """PairedVideoSource from a dataset manifest (tensors are linear light;
    videos are Reinhard-tonemapped here, albedo is already [0,1])."""
    from . import dataio

    root = Path(root) if root else Path(manifest_path).parent
    _, rows = dataio.read_manifest(manifest_path)
    samples = []
    for row in rows:
        if row.get("split") != split:
            continue
        st = dataio.SampleTuple.from_row(row)
        vid_in = reinhard_tonemap(dataio.read_tensor(root / st.video_input))
        vid_rel = reinhard_tonemap(dataio.read_tensor(root / st.video_relit))
        albedo = dataio.read_tensor(root / st.albedo)
        env_b = dataio.read_hdr_rgbe(root / st.env)
        env_a = dataio.read_hdr_rgbe(root / st.env_input) if st.env_input else None
        fwd = TrainingSample(
            relit=vid_rel, albedo=albedo, input=vid_in, env=env_b, yaw=np.asarray(st.yaw)
        )
        samples.append(fwd)
        if env_a is not None:
            samples.append(
                TrainingSample(
                    relit=vid_in,
                    albedo=albedo,
                    input=vid_rel,
                    env=env_a,
                    yaw=np.asarray(st.yaw_input),
                )
            )
        if flip_augment:
            for s in list(samples[-2 if env_a is not None else -1 :]):
                samples.append(
                    TrainingSample(
                        relit=s.relit[:, :, ::-1].copy(),
                        albedo=s.albedo[:, :, ::-1].copy(),
                        input=None if s.input is None else s.input[:, :, ::-1].copy(),
                        env=s.env,
                        yaw=s.yaw,
                    )
                )
    return PairedVideoSource(samples)


# ---------------------------------------------------------------------------
# batch construction


def _tokenize_video(video, tok_cfg, dtype):
    video = np.asarray(video, dtype=dtype)
    if video.shape[0] == 1:
        return tok.encode_image(video[0], tok_cfg)[None]
    return tok.encode(video, tok_cfg)[None]


def _tokenize_lighting(sample: TrainingSample, shape_lhw3, tok_cfg, dtype):
    frames, h, w = shape_lhw3
    enc = encode_lighting(
        sample.env, frames, h, w,
        yaw_per_frame=sample.yaw if sample.yaw is not None else np.zeros(frames),
        present=sample.env is not None,
    )
    bufs = []
    for buf in (enc.e_ldr, enc.e_log, enc.e_dir):
        bufs.append(_tokenize_video(buf, tok_cfg, dtype))
    return tuple(bufs)


@dataclass
class DenoiserBatch:
    """Assembled latents plus loss bookkeeping for one step."""

    inputs: dif.DenoiserInputs
    z0_relit: np.ndarray
    z0_albedo: np.ndarray  # None when the albedo slot is conditioning/absent
    relit_loss_mask: np.ndarray
    albedo_loss_mask: np.ndarray
    mode: ConditioningMode


def build_batch(samples, mode: ConditioningMode, tok_cfg, schedule, rng, *,
                joint=True, dtype=np.float32) -> DenoiserBatch:
    """Tokenize a homogeneous list of samples under one conditioning mode."""
    b = len(samples)
    z_relit = np.concatenate([_tokenize_video(s.relit, tok_cfg, dtype) for s in samples])
    z_albedo = np.concatenate([_tokenize_video(s.albedo, tok_cfg, dtype) for s in samples])
    has_input = all(s.input is not None for s in samples)
    z_input = (
        np.concatenate([_tokenize_video(s.input, tok_cfg, dtype) for s in samples])
        if has_input
        else None
    )
    has_env = all(s.env is not None for s in samples)
    lighting = None
    if has_env:
        per = [_tokenize_lighting(s, s.relit.shape[:3], tok_cfg, dtype) for s in samples]
        lighting = tuple(np.concatenate([p[i] for p in per]) for i in range(3))

    if mode == ConditioningMode.REAL_AUTO_LABELED:
        lighting = None  # "z_tau^E + 0": lighting features zeroed for real data
        z_input = None
    if mode in (ConditioningMode.ALBEDO_ONLY, ConditioningMode.DROPPED):
        z_input = None
    if mode == ConditioningMode.DROPPED:
        lighting = None

    sigma = dif.sample_sigma(rng, schedule, size=b)
    eps_relit = rng.standard_normal(z_relit.shape).astype(dtype)
    relit_noisy = dif.add_noise(z_relit, sigma, eps_relit)
    l = z_relit.shape[1]

    albedo_is_condition = mode in (
        ConditioningMode.ALBEDO_ONLY,
        ConditioningMode.INPUT_PLUS_ALBEDO,
        ConditioningMode.REAL_AUTO_LABELED,
    )
    if not joint:
        albedo_noisy = albedo_clean = None
        z0_albedo = None
        albedo_loss = np.zeros((b, l))
    elif albedo_is_condition:
        albedo_noisy = None
        albedo_clean = z_albedo
        z0_albedo = None
        albedo_loss = np.zeros((b, l))
    else:  # DEFAULT or DROPPED: noise introduced independently of the relit slot
        eps_albedo = rng.standard_normal(z_albedo.shape).astype(dtype)
        albedo_noisy = dif.add_noise(z_albedo, sigma, eps_albedo)
        albedo_clean = None
        z0_albedo = z_albedo
        albedo_loss = np.ones((b, l))

    inputs = dif.DenoiserInputs(
        relit_noisy=relit_noisy.astype(dtype),
        sigma=sigma,
        input_latent=z_input,
        lighting=lighting,
        albedo_noisy=None if albedo_noisy is None else albedo_noisy.astype(dtype),
        albedo_clean=albedo_clean,
    )
    return DenoiserBatch(
        inputs=inputs,
        z0_relit=z_relit,
        z0_albedo=z0_albedo,
        relit_loss_mask=np.ones((b, l)),
        albedo_loss_mask=albedo_loss,
        mode=mode,
    )


# ---------------------------------------------------------------------------
# AdamW (decoupled weight decay, bias-corrected moments)


@dataclass
class OptimizerConfig:
    lr: float = 2e-5
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-10


class OptimizerState:
    def __init__(self, params):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0


def adamw_step(params, grads, state: OptimizerState, hyper: OptimizerConfig):
    """theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)."""
    state.t += 1
    bc1 = 1.0 - hyper.beta1**state.t
    bc2 = 1.0 - hyper.beta2**state.t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - hyper.lr * (
            m_hat / (np.sqrt(v_hat) + hyper.eps) + hyper.weight_decay * p.data
        )


# ---------------------------------------------------------------------------
# stages


@dataclass
class StageMix:
    ratios: dict  # source name -> positive weight
    iterations: int

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.ratios or any(v <= 0 for v in self.ratios.values()):
            raise ValueError("ratios must be positive")


@dataclass
class DataMixConfig:
    """Two-stage co-training mix; desk-scale iteration counts by default.

    Published scale: stage 1 image:video = 1:1 for 15000 iterations, then
    stage 2 video:image:real:multi-illum = 8:1:3:2 for 12000.
    """

    stage1: StageMix = field(
        default_factory=lambda: StageMix(
            {"synthetic_image": 1.0, "synthetic_video": 1.0}, 3000
        )
    )
    stage2: StageMix = field(
        default_factory=lambda: StageMix(
            {
                "synthetic_video": 8.0,
                "synthetic_image": 1.0,
                "real_auto_labeled": 3.0,
                "multi_illumination": 2.0,
            },
            2000,
        )
    )

    @classmethod
    def paper_scale(cls):
        return cls(
            stage1=StageMix({"synthetic_image": 1.0, "synthetic_video": 1.0}, 15000),
            stage2=StageMix(
                {
                    "synthetic_video": 8.0,
                    "synthetic_image": 1.0,
                    "real_auto_labeled": 3.0,
                    "multi_illumination": 2.0,
                },
                12000,
            ),
        )


@dataclass
class TrainConfig:
    batch_size: int = 4
    seed: int = 0
    checkpoint_every: int = 1000
    lambda_albedo: float = 0.1
    mode_probs: tuple = (0.12, 0.18, 0.70)
    dropout_prob: float = 0.10
    flip_real_augment: bool = True
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    out_dir: str = "runs/train"
    prefetch: bool = True
    log_every: int = 10


def draw_source(rng, mix: StageMix):
    names = sorted(mix.ratios)
    weights = np.array([mix.ratios[n] for n in names], dtype=np.float64)
    return names[rng.choice(len(names), p=weights / weights.sum())]


def _checkpoint(path, params, model_cfg, opt: OptimizerState, step, rng, cfg_extra=None):
    extra = {
        "step": step,
        "opt_t": opt.t,
        "rng_state": json.loads(json.dumps(rng.bit_generator.state)),
    }
    if cfg_extra:
        extra.update(cfg_extra)
    tensors = [(f"opt.m.{k}", v) for k, v in opt.m.items()]
    tensors += [(f"opt.v.{k}", v) for k, v in opt.v.items()]
    mdl.save_checkpoint(path, params, model_cfg, extra=extra, extra_tensors=tensors)


def load_train_checkpoint(path):
    """(params, model_cfg, opt_state, step, rng) restored bit-exactly."""
    params, model_cfg, extra, others = mdl.load_checkpoint(path)
    opt = OptimizerState(params)
    opt.t = int(extra["opt_t"])
    for k in params:
        opt.m[k] = others[f"opt.m.{k}"]
        opt.v[k] = others[f"opt.v.{k}"]
    rng = np.random.default_rng()
    rng.bit_generator.state = extra["rng_state"]
    return params, model_cfg, opt, int(extra["step"]), rng


def train_stage(
    sources: dict,
    mix: StageMix,
    params,
    model_cfg: mdl.ModelConfig,
    tok_cfg,
    cfg: TrainConfig,
    schedule=None,
    opt: OptimizerState = None,
    rng=None,
    start_step=0,
    stage_name="stage",
):
    """Run one mixing stage; returns (history, opt, rng).

    Writes a loss CSV and periodic checkpoints under cfg.out_dir. The
    per-step plan (source, sample indices, mode, sigma, eps) is drawn from
    `rng` in a fixed order; batch assembly runs in a prefetch thread.
    """
    schedule = schedule or dif.NoiseSchedule()
    opt = opt or OptimizerState(params)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    missing = [n for n in mix.ratios if n not in sources]
    if missing:
        raise ValueError(f"mix names unknown sources: {missing}")
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stage_name}_loss.csv"
    new_csv = not csv_path.exists()
    history = []

    def make_batch(step_ix):
        name = draw_source(rng, mix)
        source = sources[name]
        samples = source.draw(rng, cfg.batch_size)
        mode = draw_mode(rng, source.kind, cfg.mode_probs, cfg.dropout_prob)
        batch = build_batch(
            samples, mode, tok_cfg, schedule, rng, joint=model_cfg.joint
        )
        return name, batch

    batch_queue = queue.Queue(maxsize=2)
    n_steps = mix.iterations

    def producer():
        for i in range(n_steps):
            batch_queue.put(make_batch(i))

    if cfg.prefetch:
        thread = threading.Thread(target=producer, daemon=True)
        thread.start()

    with open(csv_path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new_csv:
            writer.writerow(["step", "loss", "source", "mode", "sigma_mean"])
        for i in range(n_steps):
            name, batch = batch_queue.get() if cfg.prefetch else make_batch(i)
            d_relit, d_albedo, _ = dif.denoise(params, model_cfg, schedule, batch.inputs)
            loss = dif.dsm_loss(
                d_relit,
                d_albedo,
                batch.z0_relit,
                batch.z0_albedo,
                batch.inputs.sigma,
                cfg.lambda_albedo,
                schedule,
                batch.relit_loss_mask,
                batch.albedo_loss_mask if d_albedo is not None else None,
            )
            ad.zero_grads(params.values())
            ad.backward(loss)
            grads = {
                k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()
            }
            adamw_step(params, grads, opt, cfg.optimizer)
            step = start_step + i + 1
            rec = {
                "step": step,
                "loss": float(loss.data),
                "source": name,
                "mode": batch.mode.value,
                "sigma_mean": float(np.mean(batch.inputs.sigma)),
            }
            history.append(rec)
            if step % cfg.log_every == 0 or i == n_steps - 1:
                writer.writerow(
                    [step, rec["loss"], name, batch.mode.value, rec["sigma_mean"]]
                )
                fh.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _checkpoint(
                    out_dir / f"ckpt_{step:06d}.rlm", params, model_cfg, opt, step, rng,
                    cfg_extra={"tokenizer": asdict(tok_cfg)},
                )
    _checkpoint(
        out_dir / "ckpt_final.rlm", params, model_cfg, opt, start_step + n_steps, rng,
        cfg_extra={"tokenizer": asdict(tok_cfg)},
    )
    return history, opt, rng


def train(sources, data_mix: DataMixConfig, params, model_cfg, tok_cfg, cfg: TrainConfig,
          schedule=None):
    """Two-stage co-training; stage 2 is skipped if its sources are absent."""
    hist1, opt, rng = train_stage(
        sources, data_mix.stage1, params, model_cfg, tok_cfg, cfg,
        schedule=schedule, stage_name="stage1",
    )
    hist2 = []
    if all(n in sources for n in data_mix.stage2.ratios):
        hist2, opt, rng = train_stage(
            sources, data_mix.stage2, params, model_cfg, tok_cfg, cfg,
            schedule=schedule, opt=opt, rng=rng,
            start_step=data_mix.stage1.iterations, stage_name="stage2",
       )
    return hist1 + hist2


# ---------------------------------------------------------------------------
# pseudo-albedo utilities


def pseudo_albedo_average(predictions):
    """Per-pixel mean over albedo predictions from K lighting conditions."""
    preds = [np.asarray(p) for p in predictions]
    if not preds:
        raise ValueError("need at least one prediction")
    shape = preds[0].shape
    if any(p.shape != shape for p in preds):
        raise ValueError("prediction shapes differ")
    return np.mean(np.stack(preds), axis=0)


def autolabel_corpus(video_dir, checkpoint_path, out_dir, seed=0, flip=True, steps=35):
    """Annotate a directory of video tensors with predicted albedo.

    Writes (video, albedo) pairs plus horizontally flipped copies and a
    JSON-lines manifest; deterministic given the seed.
    """
    from . import dataio
    from . import pipeline

    video_dir = Path(video_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = sorted(video_dir.glob("*.rlt"))
    if not videos:
        raise dataio.FormatError(f"{video_dir}: no .rlt videos found")
    params, model_cfg, tok_cfg = pipeline.load_checkpoint_bundle(checkpoint_path)
    rows = []
    for i, vid_path in enumerate(videos):
        video = np.clip(dataio.read_tensor(vid_path), 0.0, 1.0)
        albedo = pipeline.albedo_pipeline(
            video, params, model_cfg, tok_cfg,
            sampler_cfg=dif.SamplerConfig(steps=steps, seed=seed + i),
        )
        variants = [(video, albedo, False)]
        if flip:
            variants.append((video[:, :, ::-1].copy(), albedo[:, :, ::-1].copy(), True))
        for vid, alb, flipped in variants:
            tag = f"{vid_path.stem}_flip" if flipped else vid_path.stem
            v_rel = f"{tag}_video.rlt"
            a_rel = f"{tag}_albedo.rlt"
            dataio.write_tensor(out_dir / v_rel, vid)
            dataio.write_tensor(out_dir / a_rel, alb)
            rows.append({"video": v_rel, "albedo": a_rel, "flipped": flipped, "source": vid_path.name})
    manifest = out_dir / "autolabel_manifest.jsonl"
    dataio.write_manifest(manifest, rows)
    return manifest


def load_autolabel_source(manifest_path, root=None) -> RealSource:
    from . import dataio

    root = Path(root) if root else Path(manifest_path).parent
    _, rows = dataio.read_manifest(manifest_path)
    samples = [
        TrainingSample(
            relit=np.clip(dataio.read_tensor(root / r["video"]), 0.0, 1.0),
            albedo=np.clip(dataio.read_tensor(root / r["albedo"]), 0.0, 1.0),
            input=None,
            env=None,
            yaw=None,
        )
        for r in rows
    ]
    return RealSource(samples)
