"""Command-line surface.

Subcommands: gen-data, encode-env, probe-remap, train, relight, albedo,
augment, eval, autolabel. Global flags: --seed, --data-root (or the
RELIGHT_DATA_ROOT environment variable), --config <json>, --threads.
Exit codes: 0 success, 2 validation error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np


def _add_global_flags(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-root", default=None, help="dataset root (or RELIGHT_DATA_ROOT)")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--threads", type=int, default=1)


def build_parser():
    parser = argparse.ArgumentParser(prog="relight", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic paired-illumination dataset")
    p.add_argument("--scenes", type=int, default=16)
    p.add_argument("--test-scenes", type=int, default=2)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--spp", type=int, default=128)
    p.add_argument("--max-depth", type=int, default=3)
    p.add_argument("--env-height", type=int, default=16)
    p.add_argument("--env-width", type=int, default=32)
    p.add_argument("--lambertian", action="store_true", help="diffuse-only materials")
    _add_global_flags(p)

    p = sub.add_parser("encode-env", help="write the (ldr, log, dir) lighting buffers")
    p.add_argument("hdr", help="input .hdr environment map")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--yaw-per-frame", type=float, default=0.0, help="radians per frame")
    _add_global_flags(p)

    p = sub.add_parser("probe-remap", help="chrome-ball probe -> lat-long map")
    p.add_argument("probe", help="square mirror-ball .hdr image")
    p.add_argument("--out", required=True, help="output .hdr path")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=128)
    _add_global_flags(p)

    p = sub.add_parser("train", help="run the two-stage training from a JSON config")
    p.add_argument("--out", default=None, help="override the run directory")
    _add_global_flags(p)

    p = sub.add_parser("relight", help="relight a video tensor under an environment map")
    p.add_argument("video", help="input .rlt video in [0,1]")
    p.add_argument("--env", required=True, help=".hdr environment map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--guidance", type=float, default=1.0)
    p.add_argument("--yaw", default=None, help="comma-separated per-frame yaw (radians)")
    p.add_argument("--tonemap-input", action="store_true", help="input is linear radiance")
    _add_global_flags(p)

    p = sub.add_parser("albedo", help="estimate albedo (lighting absent)")
    p.add_argument("video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--tonemap-input", action="store_true")
    _add_global_flags(p)

    p = sub.add_parser("augment", help="n relit samples without an environment map")
    p.add_argument("video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--tonemap-input", action="store_true")
    _add_global_flags(p)

    p = sub.add_parser("eval", help="metrics over a manifest's test split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-json", default=None)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--mask-background", action="store_true")
    _add_global_flags(p)

    p = sub.add_parser("autolabel", help="annotate a video directory with albedo")
    p.add_argument("--videos", required=True, help="directory of .rlt videos")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=35)
    p.add_argument("--no-flip", action="store_true")
    _add_global_flags(p)

    return parser


def _load_video(args, path):
    from . import dataio
    from .envlight import reinhard_tonemap

    video = dataio.read_tensor(path)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ValueError(f"{path}: expected an (L, H, W, 3) video tensor")
    if args.tonemap_input:
        video = reinhard_tonemap(video)
    if video.min() < 0 or video.max() > 1:
        raise ValueError(f"{path}: values outside [0,1]; pass --tonemap-input for linear video")
    return video


def _write_video_outputs(out_dir, name, video):
    from . import dataio

    out_dir = Path(out_dir)
    dataio.write_tensor(out_dir / f"{name}.rlt", video)
    dataio.write_png(out_dir / f"{name}_f00.png", video[0])


def cmd_gen_data(args):
    from . import dataio
    from .render import RenderConfig, SceneLimits

    cfg = RenderConfig(
        width=args.width, height=args.height, frames=args.frames,
        spp=args.spp, max_depth=args.max_depth, seed=args.seed,
    )
    limits = SceneLimits(lambertian_only=args.lambertian)
    out = dataio.data_root(args.data_root) / args.out
    manifest = dataio.make_dataset(
        args.scenes, cfg, out, master_seed=args.seed, n_test=args.test_scenes,
        limits=limits, env_hw=(args.env_height, args.env_width), threads=args.threads,
    )
    print(f"wrote {manifest}")
    return 0


def cmd_encode_env(args):
    from . import dataio
    from .envlight import encode_lighting

    env = dataio.read_hdr_rgbe(args.hdr)
    yaws = np.arange(args.frames) * args.yaw_per_frame
    enc = encode_lighting(env, args.frames, args.height, args.width, yaw_per_frame=yaws)
    out = Path(args.out)
    dataio.write_tensor(out / "e_ldr.rlt", enc.e_ldr)
    dataio.write_tensor(out / "e_log.rlt", enc.e_log)
    dataio.write_tensor(out / "e_dir.rlt", enc.e_dir)
    dataio.write_png(out / "e_ldr_f00.png", enc.e_ldr[0])
    (out / "meta.json").write_text(json.dumps({"e_max": enc.e_max, "present": enc.present}))
    print(f"encoded {args.hdr} -> {out} (e_max {enc.e_max:.4f})")
    return 0


def cmd_probe_remap(args):
    from . import dataio
    from .envlight import chrome_probe_to_latlong

    probe = dataio.read_hdr_rgbe(args.probe)
    env = chrome_probe_to_latlong(probe.pixels, args.height, args.width)
    dataio.write_hdr_rgbe(args.out, env)
    print(f"remapped {args.probe} -> {args.out}")
    return 0


def cmd_train(args):
    from . import dataio, model as mdl, tokenizer as tok, trainer

    if not args.config:
        raise ValueError("train needs --config (JSON)")
    cfg_json = json.loads(Path(args.config).read_text())
    root = dataio.data_root(args.data_root)

    tok_cfg = tok.TokenizerConfig(**cfg_json.get("tokenizer", {}))
    model_kwargs = dict(cfg_json.get("model", {}))
    model_kwargs.setdefault("latent_channels", tok_cfg.channels)
    model_cfg = mdl.ModelConfig(**model_kwargs)
    train_kwargs = dict(cfg_json.get("train", {}))
    opt_kwargs = train_kwargs.pop("optimizer", {})
    cfg = trainer.TrainConfig(
        optimizer=trainer.OptimizerConfig(**opt_kwargs),
        **train_kwargs,
    )
    if args.out:
        cfg.out_dir = args.out
    cfg.seed = train_kwargs.get("seed", args.seed)

    data = cfg_json.get("data", {})
    sources = {}
    if "synthetic_manifest" in data:
        video_src = trainer.load_manifest_source(root / data["synthetic_manifest"])
        sources["synthetic_video"] = video_src
        sources["synthetic_image"] = trainer.ImageSource(video_src)
    if "autolabel_manifest" in data:
        sources["real_auto_labeled"] = trainer.load_autolabel_source(
            root / data["autolabel_manifest"]
        )
    if not sources:
        raise ValueError("config.data must name at least synthetic_manifest")

    mix_json = cfg_json.get("mix")
    if mix_json:
        mix = trainer.DataMixConfig(
            stage1=trainer.StageMix(**mix_json["stage1"]),
            stage2=trainer.StageMix(**mix_json["stage2"]) if mix_json.get("stage2") else
            trainer.DataMixConfig().stage2,
        )
    else:
        mix = trainer.DataMixConfig()

    params = mdl.init_params(model_cfg, seed=cfg.seed)
    history = trainer.train(sources, mix, params, model_cfg, tok_cfg, cfg)
    print(f"trained {len(history)} steps; final loss {history[-1]['loss']:.5f}; "
          f"checkpoints in {cfg.out_dir}")
    return 0


def cmd_relight(args):
    from . import dataio, diffusion as dif, pipeline

    video = _load_video(args, args.video)
    env = dataio.read_hdr_rgbe(args.env)
    yaw = None
    if args.yaw:
        yaw = np.array([float(v) for v in args.yaw.split(",")])
        if yaw.shape[0] != video.shape[0]:
            raise ValueError(f"--yaw needs {video.shape[0]} values")
    params, model_cfg, tok_cfg = pipeline.load_checkpoint_bundle(args.checkpoint)
    relit, albedo = pipeline.relight_pipeline(
        video, env, yaw, params, model_cfg, tok_cfg,
        sampler_cfg=dif.SamplerConfig(steps=args.steps, guidance_scale=args.guidance,
                                      seed=args.seed),
    )
    _write_video_outputs(args.out, "relit", relit)
    if albedo is not None:
        _write_video_outputs(args.out, "albedo", albedo)
    print(f"wrote relit/albedo tensors to {args.out}")
    return 0


def cmd_albedo(args):
    from . import diffusion as dif, pipeline

    video = _load_video(args, args.video)
    params, model_cfg, tok_cfg = pipeline.load_checkpoint_bundle(args.checkpoint)
    albedo = pipeline.albedo_pipeline(
        video, params, model_cfg, tok_cfg,
        sampler_cfg=dif.SamplerConfig(steps=args.steps, seed=args.seed),
    )
    _write_video_outputs(args.out, "albedo", albedo)
    print(f"wrote albedo tensor to {args.out}")
    return 0


def cmd_augment(args):
    from . import pipeline

    video = _load_video(args, args.video)
    params, model_cfg, tok_cfg = pipeline.load_checkpoint_bundle(args.checkpoint)
    outs = pipeline.augment_pipeline(
        video, params, model_cfg, args.n, tok_cfg, steps=args.steps, base_seed=args.seed
    )
    for i, out in enumerate(outs):
        _write_video_outputs(args.out, f"augment_{i:02d}", out)
    print(f"wrote {len(outs)} augmented videos to {args.out}")
    return 0


def cmd_eval(args):
    from . import dataio, diffusion as dif, pipeline

    root = dataio.data_root(args.data_root)
    report = pipeline.evaluate_set(
        root / args.manifest, args.checkpoint,
        sampler_cfg=dif.SamplerConfig(steps=args.steps, seed=args.seed),
        out_json=args.out_json, out_csv=args.out_csv,
        mask_background=args.mask_background,
    )
    print(json.dumps(report.aggregate, indent=2))
    return 0


def cmd_autolabel(args):
    from . import trainer

    manifest = trainer.autolabel_corpus(
        args.videos, args.checkpoint, args.out, seed=args.seed,
        flip=not args.no_flip, steps=args.steps,
    )
    print(f"wrote {manifest}")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "encode-env": cmd_encode_env,
    "probe-remap": cmd_probe_remap,
    "train": cmd_train,
    "relight": cmd_relight,
    "albedo": cmd_albedo,
    "augment": cmd_augment,
    "eval": cmd_eval,
    "autolabel": cmd_autolabel,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
