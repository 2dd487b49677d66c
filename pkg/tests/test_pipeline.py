import json

import numpy as np
import pytest

from relight import pipeline
from relight.dataio import read_manifest, read_tensor, SampleTuple
from relight.diffusion import SamplerConfig
from relight.envlight import random_environment, reinhard_tonemap
from relight.pipeline import (
    albedo_pipeline,
    augment_pipeline,
    evaluate_set,
    input_copy_baseline,
    load_checkpoint_bundle,
    mean_gray_baseline,
    relight_pipeline,
)


@pytest.fixture(scope="module")
def bundle(shared_checkpoint):
    return load_checkpoint_bundle(shared_checkpoint)


@pytest.fixture()
def video():
    return np.random.default_rng(0).uniform(0, 1, size=(2, 16, 16, 3))


FAST = SamplerConfig(steps=3, seed=5)


class TestRelightPipeline:
    def test_dims_and_range(self, bundle, video):
        params, model_cfg, tok_cfg = bundle
        env = random_environment(1, 8, 16)
        relit, albedo = relight_pipeline(
            video, env, np.zeros(2), params, model_cfg, tok_cfg, sampler_cfg=FAST
        )
        assert relit.shape == video.shape
        assert albedo.shape == video.shape
        for out in (relit, albedo):
            assert out.min() >= 0.0 and out.max() <= 1.0

    def test_deterministic(self, bundle, video):
        params, model_cfg, tok_cfg = bundle
        env = random_environment(2, 8, 16)
        a = relight_pipeline(video, env, None, params, model_cfg, tok_cfg, sampler_cfg=FAST)
        b = relight_pipeline(video, env, None, params, model_cfg, tok_cfg, sampler_cfg=FAST)
        assert (a[0] == b[0]).all() and (a[1] == b[1]).all()


class TestAlbedoPipeline:
    def test_dims_and_determinism(self, bundle, video):
        params, model_cfg, tok_cfg = bundle
        a = albedo_pipeline(video, params, model_cfg, tok_cfg, sampler_cfg=FAST)
        b = albedo_pipeline(video, params, model_cfg, tok_cfg, sampler_cfg=FAST)
        assert a.shape == video.shape
        assert (a == b).all()
        assert a.min() >= 0.0 and a.max() <= 1.0


class TestAugmentPipeline:
    def test_outputs_distinct_and_deterministic(self, bundle, video):
        params, model_cfg, tok_cfg = bundle
        outs = augment_pipeline(video, params, model_cfg, 3, tok_cfg, steps=3, base_seed=7)
        assert len(outs) == 3
        for i in range(3):
            assert outs[i].shape == video.shape
            for j in range(i + 1, 3):
                assert np.abs(outs[i] - outs[j]).max() > 0
        again = augment_pipeline(video, params, model_cfg, 3, tok_cfg, steps=3, base_seed=7)
        assert all((a == b).all() for a, b in zip(outs, again))


class TestEvaluateSet:
    def test_report_rows_and_outputs(self, shared_dataset, shared_checkpoint, tmp_path):
        report = evaluate_set(
            shared_dataset, shared_checkpoint, sampler_cfg=FAST,
            out_json=tmp_path / "rep.json", out_csv=tmp_path / "rep.csv",
        )
        _, rows = read_manifest(shared_dataset)
        n_test = sum(1 for r in rows if r["split"] == "test")
        assert len(report.per_sample) == n_test
        assert report.aggregate["n_samples"] == n_test
        assert (tmp_path / "rep.json").exists() and (tmp_path / "rep.csv").exists()
        loaded = json.loads((tmp_path / "rep.json").read_text())
        assert loaded["aggregate"]["psnr_relit"] == pytest.approx(
            report.aggregate["psnr_relit"]
        )

    def test_gt_as_prediction_hits_caps(self, shared_dataset, shared_checkpoint, monkeypatch):
        root = shared_dataset.parent

        def fake_sampler(videos, envs, yaws, params, model_cfg, tok_cfg, schedule,
                         sampler_cfg, albedo_conditions=None):
            _, rows = read_manifest(shared_dataset)
            rows = [r for r in rows if r["split"] == "test"]
            gts = [
                reinhard_tonemap(read_tensor(root / SampleTuple.from_row(r).video_relit))
                for r in rows[: len(videos)]
            ]
            albs = [
                read_tensor(root / SampleTuple.from_row(r).albedo) for r in rows[: len(videos)]
            ]
            return gts, albs

        monkeypatch.setattr(pipeline, "_run_sampler", fake_sampler)
        report = evaluate_set(shared_dataset, shared_checkpoint, sampler_cfg=FAST)
        for row in report.per_sample:
            assert row["psnr_relit"] == 99.0
            assert row["ssim_relit"] == pytest.approx(1.0, abs=1e-9)
            assert row["psnr_albedo"] == 99.0

    def test_invariant_to_prediction_prescaling(
        self, shared_dataset, shared_checkpoint, monkeypatch
    ):
        rng = np.random.default_rng(3)
        fixed = rng.uniform(0.05, 1.0, size=(2, 16, 16, 3))

        reports = []
        for alpha in (1.0, 0.37, 12.0):

            def fake_sampler(videos, envs, yaws, *a, alpha=alpha, **k):
                return (
                    [fixed * alpha for _ in videos],
                    [fixed * (2 * alpha) for _ in videos],
                )

            monkeypatch.setattr(pipeline, "_run_sampler", fake_sampler)
            reports.append(evaluate_set(shared_dataset, shared_checkpoint, sampler_cfg=FAST))
        base = reports[0]
        for rep in reports[1:]:
            for a, b in zip(base.per_sample, rep.per_sample):
                assert a["psnr_relit"] == pytest.approx(b["psnr_relit"], abs=1e-9)
                assert a["ssim_relit"] == pytest.approx(b["ssim_relit"], abs=1e-9)
                assert a["psnr_albedo"] == pytest.approx(b["psnr_albedo"], abs=1e-9)


class TestBaselines:
    def test_input_copy_baseline_finite(self, shared_dataset):
        val = input_copy_baseline(shared_dataset)
        assert 0 < val < 99

    def test_mean_gray_baseline_finite(self, shared_dataset):
        val = mean_gray_baseline(shared_dataset)
        assert 0 < val < 99
