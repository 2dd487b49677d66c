import numpy as np
import pytest

from relight.dataio import make_dataset, read_manifest
from relight.diffusion import NoiseSchedule
from relight.model import ModelConfig, init_params, load_checkpoint
from relight.render import RenderConfig, SceneLimits
from relight.tokenizer import TokenizerConfig
from relight.trainer import (
    ConditioningMode,
    DataMixConfig,
    ImageSource,
    OptimizerConfig,
    OptimizerState,
    StageMix,
    TrainConfig,
    TrainingSample,
    adamw_step,
    build_batch,
    draw_mode,
    draw_source,
    load_manifest_source,
    load_train_checkpoint,
    pseudo_albedo_average,
    train_stage,
)
from relight.autodiff import Tensor

SCHED = NoiseSchedule()


class TestDrawMode:
    def test_paired_frequencies(self):
        rng = np.random.default_rng(0)
        counts = {m: 0 for m in ConditioningMode}
        n = 100_000
        for _ in range(n):
            counts[draw_mode(rng, "paired")] += 1
        assert counts[ConditioningMode.DROPPED] / n == pytest.approx(0.10, abs=0.005)
        kept = n - counts[ConditioningMode.DROPPED]
        assert counts[ConditioningMode.ALBEDO_ONLY] / kept == pytest.approx(0.12, abs=0.005)
        assert counts[ConditioningMode.INPUT_PLUS_ALBEDO] / kept == pytest.approx(0.18, abs=0.005)
        assert counts[ConditioningMode.DEFAULT] / kept == pytest.approx(0.70, abs=0.005)

    def test_real_source_modes(self):
        rng = np.random.default_rng(1)
        modes = {draw_mode(rng, "real") for _ in range(1000)}
        assert modes <= {ConditioningMode.REAL_AUTO_LABELED, ConditioningMode.DROPPED}

    def test_seeded_reproducible(self):
        a = [draw_mode(np.random.default_rng(7), "paired") for _ in range(50)]
        b = [draw_mode(np.random.default_rng(7), "paired") for _ in range(50)]
        assert a == b

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            draw_mode(np.random.default_rng(0), "webcam")


def toy_sample(rng, frames=2, size=8, with_env=True):
    from relight.envlight import random_environment

    return TrainingSample(
        relit=rng.uniform(0, 1, size=(frames, size, size, 3)),
        albedo=rng.uniform(0, 1, size=(frames, size, size, 3)),
        input=rng.uniform(0, 1, size=(frames, size, size, 3)),
        env=random_environment(3, 8, 16) if with_env else None,
        yaw=np.zeros(frames),
    )


class TestBuildBatch:
    TOK = TokenizerConfig(1, 2)

    def build(self, mode, joint=True):
        rng = np.random.default_rng(2)
        samples = [toy_sample(rng) for _ in range(2)]
        return build_batch(samples, mode, self.TOK, SCHED, rng, joint=joint)

    def test_default_mode(self):
        b = self.build(ConditioningMode.DEFAULT)
        assert b.inputs.input_latent is not None
        assert b.inputs.lighting is not None
        assert b.inputs.albedo_noisy is not None and b.inputs.albedo_clean is None
        assert (b.relit_loss_mask == 1).all() and (b.albedo_loss_mask == 1).all()

    def test_input_plus_albedo(self):
        b = self.build(ConditioningMode.INPUT_PLUS_ALBEDO)
        assert b.inputs.input_latent is not None
        assert b.inputs.albedo_clean is not None and b.inputs.albedo_noisy is None
        assert (b.albedo_loss_mask == 0).all()  # clean condition, no loss

    def test_albedo_only_drops_input(self):
        b = self.build(ConditioningMode.ALBEDO_ONLY)
        assert b.inputs.input_latent is None
        assert b.inputs.albedo_clean is not None
        assert b.inputs.lighting is not None

    def test_real_auto_labeled_zeroes_lighting(self):
        b = self.build(ConditioningMode.REAL_AUTO_LABELED)
        assert b.inputs.lighting is None
        assert b.inputs.input_latent is None
        assert b.inputs.albedo_clean is not None

    def test_dropped_zeroes_everything(self):
        b = self.build(ConditioningMode.DROPPED)
        assert b.inputs.lighting is None
        assert b.inputs.input_latent is None
        assert b.inputs.albedo_noisy is not None  # targets stay noised

    def test_ablation_has_no_albedo(self):
        b = self.build(ConditioningMode.DEFAULT, joint=False)
        assert b.inputs.albedo_noisy is None and b.inputs.albedo_clean is None
        assert b.z0_albedo is None

    def test_image_source_single_frame(self):
        rng = np.random.default_rng(3)
        base_samples = [toy_sample(rng, frames=4) for _ in range(3)]
        from relight.trainer import PairedVideoSource

        src = ImageSource(PairedVideoSource(base_samples))
        imgs = src.draw(rng, 2)
        assert all(s.relit.shape[0] == 1 for s in imgs)
        b = build_batch(imgs, ConditioningMode.DEFAULT, TokenizerConfig(2, 2), SCHED, rng)
        assert b.z0_relit.shape[1] == 1  # one latent frame


class TestAdamW:
    def test_decay_only(self):
        params = {"w": Tensor(np.array([1.0]), requires_grad=True)}
        state = OptimizerState(params)
        adamw_step(params, {"w": np.array([0.0])}, state, OptimizerConfig())
        assert params["w"].data[0] == pytest.approx(1.0 - 2e-5 * 0.1, abs=1e-15)

    def test_scalar_hand_evaluation(self):
        hp = OptimizerConfig()
        theta = 1.0
        params = {"w": Tensor(np.array([theta]), requires_grad=True)}
        state = OptimizerState(params)
        adamw_step(params, {"w": np.array([1.0])}, state, hp)
        want = theta - hp.lr * (1.0 / (1.0 + hp.eps) + hp.weight_decay * theta)
        assert params["w"].data[0] == pytest.approx(want, abs=1e-12)

    def test_matches_adam_oracle_without_decay(self):
        hp = OptimizerConfig(lr=1e-3, weight_decay=0.0)
        rng = np.random.default_rng(4)
        theta = rng.normal(size=5)
        params = {"w": Tensor(theta.copy(), requires_grad=True)}
        state = OptimizerState(params)
        m = np.zeros(5)
        v = np.zeros(5)
        ref = theta.copy()
        for t in range(1, 6):
            g = rng.normal(size=5)
            adamw_step(params, {"w": g}, state, hp)
            m = hp.beta1 * m + (1 - hp.beta1) * g
            v = hp.beta2 * v + (1 - hp.beta2) * g * g
            ref -= hp.lr * (m / (1 - hp.beta1**t)) / (np.sqrt(v / (1 - hp.beta2**t)) + hp.eps)
            assert np.allclose(params["w"].data, ref, atol=1e-14)

    def test_identical_runs(self):
        def run():
            rng = np.random.default_rng(5)
            params = {"w": Tensor(np.ones(3), requires_grad=True)}
            state = OptimizerState(params)
            for _ in range(10):
                adamw_step(params, {"w": rng.normal(size=3)}, state, OptimizerConfig(lr=1e-3))
            return params["w"].data

        assert (run() == run()).all()


class TestMixing:
    def test_stage2_ratios(self):
        mix = DataMixConfig().stage2
        rng = np.random.default_rng(6)
        n = 100_000
        counts = {}
        for _ in range(n):
            name = draw_source(rng, mix)
            counts[name] = counts.get(name, 0) + 1
        total_ratio = sum(mix.ratios.values())
        for name, ratio in mix.ratios.items():
            assert counts[name] / n == pytest.approx(ratio / total_ratio, abs=0.005)

    def test_paper_scale_iterations(self):
        mix = DataMixConfig.paper_scale()
        assert mix.stage1.iterations == 15_000
        assert mix.stage2.iterations == 12_000
        assert mix.stage2.ratios == {
            "synthetic_video": 8.0,
            "synthetic_image": 1.0,
            "real_auto_labeled": 3.0,
            "multi_illumination": 2.0,
        }

    def test_invalid_mix(self):
        with pytest.raises(ValueError):
            StageMix({"a": -1.0}, 10)
        with pytest.raises(ValueError):
            StageMix({"a": 1.0}, 0)


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("toyds")
    cfg = RenderConfig(width=8, height=8, frames=2, spp=8, seed=0)
    manifest = make_dataset(
        6, cfg, out, master_seed=11, n_test=2, limits=SceneLimits(lambertian_only=True),
        env_hw=(8, 16),
    )
    return manifest


class TestTrainStage:
    def make_setup(self, tiny_dataset, seed=0, out_dir=None, steps=40):
        tok_cfg = TokenizerConfig(1, 2)
        model_cfg = ModelConfig(latent_channels=tok_cfg.channels, width=32, depth=2, heads=2)
        params = init_params(model_cfg, seed=seed)
        video_src = load_manifest_source(tiny_dataset)
        sources = {"synthetic_video": video_src, "synthetic_image": ImageSource(video_src)}
        cfg = TrainConfig(
            batch_size=2,
            seed=seed,
            checkpoint_every=steps // 2,
            optimizer=OptimizerConfig(lr=1e-3),
            out_dir=str(out_dir),
            log_every=5,
        )
        mix = StageMix({"synthetic_video": 1.0, "synthetic_image": 1.0}, steps)
        return sources, mix, params, model_cfg, tok_cfg, cfg

    def test_loss_decreases(self, tiny_dataset, tmp_path):
        sources, mix, params, model_cfg, tok_cfg, cfg = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "run", steps=150
        )
        history, _, _ = train_stage(
            sources, mix, params, model_cfg, tok_cfg, cfg, stage_name="stage1"
        )
        losses = np.array([h["loss"] for h in history])
        assert np.mean(losses[:25]) > np.mean(losses[-25:])
        assert (tmp_path / "run" / "stage1_loss.csv").exists()

    def test_checkpoint_resume_bit_identical(self, tiny_dataset, tmp_path):
        sources, mix, params, model_cfg, tok_cfg, cfg = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "a", steps=20
        )
        train_stage(sources, mix, params, model_cfg, tok_cfg, cfg)
        final_a = {k: p.data.copy() for k, p in params.items()}

        # same run, stopped at 10 then resumed for 10 more
        sources, _, params_b, model_cfg, tok_cfg, cfg_b = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "b", steps=20
        )
        mix_half = StageMix(mix.ratios, 10)
        cfg_b.checkpoint_every = 10
        train_stage(sources, mix_half, params_b, model_cfg, tok_cfg, cfg_b)
        params_c, model_cfg_c, opt_c, step_c, rng_c = load_train_checkpoint(
            tmp_path / "b" / "ckpt_000010.rlm"
        )
        assert step_c == 10
        train_stage(
            sources, StageMix(mix.ratios, 10), params_c, model_cfg_c, tok_cfg, cfg_b,
            opt=opt_c, rng=rng_c, start_step=10,
        )
        for k in final_a:
            assert (params_c[k].data == final_a[k]).all(), k

    def test_prefetch_equals_synchronous(self, tiny_dataset, tmp_path):
        sources, mix, params, model_cfg, tok_cfg, cfg = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "p1", steps=12
        )
        train_stage(sources, mix, params, model_cfg, tok_cfg, cfg)
        a = {k: p.data.copy() for k, p in params.items()}
        sources, mix, params2, model_cfg, tok_cfg, cfg2 = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "p2", steps=12
        )
        cfg2.prefetch = False
        train_stage(sources, mix, params2, model_cfg, tok_cfg, cfg2)
        for k in a:
            assert (params2[k].data == a[k]).all()

    def test_unknown_mix_source_rejected(self, tiny_dataset, tmp_path):
        sources, mix, params, model_cfg, tok_cfg, cfg = self.make_setup(
            tiny_dataset, out_dir=tmp_path / "x"
        )
        bad = StageMix({"nonexistent": 1.0}, 5)
        with pytest.raises(ValueError):
            train_stage(sources, bad, params, model_cfg, tok_cfg, cfg)


class TestPseudoAlbedo:
    def test_identity(self):
        x = np.random.default_rng(0).uniform(size=(2, 4, 4, 3))
        assert np.allclose(pseudo_albedo_average([x, x, x]), x, atol=1e-12)

    def test_two_values(self):
        a = np.zeros((1, 2, 2, 3))
        b = np.ones((1, 2, 2, 3))
        assert (pseudo_albedo_average([a, b]) == 0.5).all()

    def test_variance_shrinks_as_one_over_k(self):
        rng = np.random.default_rng(1)
        base = rng.uniform(size=(4, 4, 3))
        for k in (4, 16):
            means = []
            for _ in range(200):
                preds = [base + 0.1 * rng.standard_normal(base.shape) for _ in range(k)]
                means.append(pseudo_albedo_average(preds))
            var = np.var(np.stack(means) - base)
            assert var == pytest.approx(0.01 / k, rel=0.25)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            pseudo_albedo_average([])
