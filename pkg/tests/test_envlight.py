import numpy as np
import pytest

from relight.envlight import (
    EnvironmentMap,
    InvalidInputError,
    chrome_probe_to_latlong,
    direction_map,
    encode_lighting,
    log_encode,
    random_environment,
    reinhard_tonemap,
    resize_env,
    rotate_env,
    sample_env,
)


def rot_y(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


class TestTonemap:
    def test_fixed_points(self):
        assert reinhard_tonemap(np.array(0.0)) == 0.0
        assert reinhard_tonemap(np.array(1.0)) == 0.5
        assert reinhard_tonemap(np.array(3.0)) == 0.75

    def test_range_and_monotone(self):
        x = np.random.default_rng(1).uniform(0, 1e6, size=10000)
        y = reinhard_tonemap(x)
        assert (y >= 0).all() and (y < 1).all()
        order = np.argsort(x)
        assert (np.diff(y[order]) >= 0).all()

    def test_nonfinite_rejected(self):
        with pytest.raises(InvalidInputError):
            reinhard_tonemap(np.array([1.0, np.inf]))
        with pytest.raises(InvalidInputError):
            reinhard_tonemap(np.array([np.nan]))


class TestLogEncode:
    def test_all_black(self):
        out, e_max = log_encode(np.zeros((2, 4, 3)))
        assert e_max == 0.0
        assert (out == 0).all()

    def test_max_e_minus_one_encodes_to_one(self):
        x = np.full((2, 4, 3), 0.5)
        x[0, 0, 0] = np.e - 1.0
        out, e_max = log_encode(x)
        assert out[0, 0, 0] == pytest.approx(1.0, abs=1e-12)
        assert e_max == pytest.approx(1.0, abs=1e-7)

    def test_two_pixel_map(self):
        x = np.array([0.0, np.e**2 - 1.0])
        out, e_max = log_encode(x)
        assert e_max == pytest.approx(2.0, abs=1e-12)
        assert np.allclose(out, [0.0, 1.0])


class TestDirectionMap:
    def test_center_pixel_is_forward(self):
        d = direction_map(1, 3, 5, [0.0])
        assert np.allclose(d[0, 1, 2], [0.0, 0.0, -1.0], atol=1e-7)

    def test_unit_norm(self):
        d = direction_map(3, 7, 9, [0.0, 1.3, -2.1])
        norms = np.linalg.norm(d, axis=-1)
        assert np.abs(norms - 1.0).max() <= 1e-6

    def test_yaw_pi_flips_forward(self):
        d = direction_map(1, 3, 5, [np.pi])
        assert np.allclose(d[0, 1, 2], [0.0, 0.0, 1.0], atol=1e-6)


class TestResize:
    def test_constant_map(self):
        env = EnvironmentMap(np.full((4, 8, 3), 2.5, dtype=np.float32))
        out = resize_env(env, 7, 13)
        assert out.shape == (7, 13, 3)
        assert np.allclose(out, 2.5)

    def test_identity_resize(self):
        pix = np.random.default_rng(2).uniform(0, 5, size=(6, 12, 3)).astype(np.float32)
        env = EnvironmentMap(pix)
        out = resize_env(env, 6, 12)
        assert np.abs(out - pix).max() <= 1e-6

    def test_hot_texel_hand_weights(self):
        # 2x4 map, single hot texel at row 0, col 1; resize to 4x8.
        pix = np.zeros((2, 4, 3), dtype=np.float32)
        pix[0, 1] = 1.0
        out = resize_env(EnvironmentMap(pix), 4, 8)
        # out(0,2): u=0.3125 -> x=0.75 (cols 0,1 w=0.25/0.75); v=0.125 -> y clamps to row 0
        assert np.allclose(out[0, 2], 0.75, atol=1e-6)
        # out(0,3): u=0.4375 -> x=1.25 (cols 1,2 w=0.75/0.25); row 0
        assert np.allclose(out[0, 3], 0.75, atol=1e-6)
        # out(1,2): v=0.375 -> y=0.25 (rows 0,1 w=0.75/0.25); x=0.75
        assert np.allclose(out[1, 2], 0.75 * 0.75, atol=1e-6)
        # out(2,5): u=0.6875 -> x=2.25 (cols 2,3), both zero
        assert np.allclose(out[2, 5], 0.0, atol=1e-6)

    def test_zero_dims_rejected(self):
        env = EnvironmentMap(np.ones((2, 4, 3), dtype=np.float32))
        with pytest.raises(InvalidInputError):
            resize_env(env, 0, 8)


class TestSample:
    def test_constant_map(self):
        env = EnvironmentMap(np.full((4, 8, 3), 1.7, dtype=np.float32))
        for d in [(0, 0, -1), (0, 1, 0), (1, 0, 0)]:
            assert np.allclose(sample_env(env, np.array(d, float)), 1.7, atol=1e-6)

    def test_top_pole_uses_top_row(self):
        pix = np.zeros((4, 8, 3), dtype=np.float32)
        pix[0, :, :] = 3.0  # constant top row; polar clamp must land here
        env = EnvironmentMap(pix)
        assert np.allclose(sample_env(env, np.array([0.0, 1.0, 0.0])), 3.0, atol=1e-6)

    def test_rotation_property(self):
        rng = np.random.default_rng(3)
        pix = rng.uniform(0, 4, size=(8, 16, 3)).astype(np.float32)
        env = EnvironmentMap(pix)
        for _ in range(20):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            psi = rng.uniform(-6, 6)
            lhs = sample_env(rotate_env(env, psi), d)
            rhs = sample_env(env, rot_y(-psi) @ d)
            assert np.allclose(lhs, rhs, atol=1e-4)

    def test_non_unit_rejected(self):
        env = EnvironmentMap(np.ones((2, 4, 3), dtype=np.float32))
        with pytest.raises(InvalidInputError):
            sample_env(env, np.array([0.0, 0.0, -2.0]))


class TestRotate:
    def test_zero_and_full_turn(self):
        rng = np.random.default_rng(4)
        pix = rng.uniform(0, 2, size=(4, 8, 3)).astype(np.float32)
        env = EnvironmentMap(pix)
        d = np.array([0.3, 0.2, -0.5])
        d /= np.linalg.norm(d)
        base = sample_env(env, d)
        assert np.allclose(sample_env(rotate_env(env, 0.0), d), base, atol=1e-9)
        assert np.allclose(sample_env(rotate_env(env, 2 * np.pi), d), base, atol=1e-6)

    def test_composition(self):
        env = EnvironmentMap(np.random.default_rng(5).uniform(0, 2, (4, 8, 3)).astype(np.float32))
        twice = rotate_env(rotate_env(env, np.pi), np.pi)
        once = rotate_env(env, 2 * np.pi)
        assert twice.yaw_offset == once.yaw_offset
        d = np.array([1.0, 0.0, 0.0])
        assert np.allclose(sample_env(twice, d), sample_env(once, d), atol=1e-12)


def render_chrome_probe(env, size):
    """Forward orthographic mirror-ball render (test oracle for the remap)."""
    ii = (np.arange(size) + 0.5) / size
    px, py = np.meshgrid(ii * 2 - 1, -(ii * 2 - 1))
    r2 = px**2 + py**2
    inside = r2 <= 1.0
    nz = np.sqrt(np.clip(1.0 - r2, 0.0, 1.0))
    n = np.stack([px, py, nz], axis=-1)
    # view direction (0,0,-1); reflection r = d - 2(d.n)n = 2*nz*n - (0,0,1)
    refl = 2 * nz[..., None] * n - np.array([0.0, 0.0, 1.0])
    refl_flat = refl[inside]
    refl_flat /= np.linalg.norm(refl_flat, axis=-1, keepdims=True)
    probe = np.zeros((size, size, 3), dtype=np.float32)
    probe[inside] = sample_env(env, refl_flat)
    return probe


class TestChromeProbe:
    def test_center_maps_to_back_direction(self):
        probe = np.zeros((64, 64, 3), dtype=np.float32)
        probe[30:34, 30:34] = 5.0  # center blob -> reflected direction (0,0,+1)
        env = chrome_probe_to_latlong(probe, 32, 64)
        val = sample_env(env, np.array([0.0, 0.0, 1.0]))
        assert val[0] > 2.0
        assert sample_env(env, np.array([0.0, 0.0, -0.999987]) / 0.999987)[0] < 1e-3

    def test_uniform_probe(self):
        probe = np.full((64, 64, 3), 2.0, dtype=np.float32)
        env = chrome_probe_to_latlong(probe, 16, 32)
        assert np.allclose(env.pixels, 2.0, atol=1e-5)

    def test_round_trip(self):
        src = random_environment(11, 64, 128)
        probe = render_chrome_probe(src, 512)
        rec = chrome_probe_to_latlong(probe, 64, 128)
        uu = (np.arange(128) + 0.5) / 128
        vv = (np.arange(64) + 0.5) / 64
        u, v = np.meshgrid(uu, vv)
        theta = np.pi * v
        phi = 2 * np.pi * (u - 0.5)
        z = -np.sin(theta) * np.cos(phi)
        covered = z >= 0.0  # hemisphere around the probe's best-sampled pole
        rel = np.abs(rec.pixels - src.pixels).sum(-1) / np.maximum(src.pixels.sum(-1), 1e-6)
        assert rel[covered].mean() <= 0.05

    def test_non_square_rejected(self):
        with pytest.raises(InvalidInputError):
            chrome_probe_to_latlong(np.zeros((8, 10, 3), dtype=np.float32), 8, 16)

    def test_unknown_model_rejected(self):
        with pytest.raises(InvalidInputError):
            chrome_probe_to_latlong(np.zeros((8, 8, 3), dtype=np.float32), 8, 16, model="pinhole")


class TestEncodeLighting:
    def test_absent(self):
        enc = encode_lighting(None, 3, 4, 8)
        assert not enc.present
        assert enc.e_max == 0.0
        for buf in (enc.e_ldr, enc.e_log, enc.e_dir):
            assert buf.shape == (3, 4, 8, 3)
            assert (buf == 0).all()

    def test_constant_map(self):
        env = EnvironmentMap(np.full((4, 8, 3), 3.0, dtype=np.float32))
        enc = encode_lighting(env, 2, 8, 16)
        assert np.allclose(enc.e_ldr, 0.75, atol=1e-6)
        assert enc.present

    def test_log_max_is_one(self):
        env = random_environment(7, 8, 16)
        enc = encode_lighting(env, 4, 8, 16, yaw_per_frame=np.linspace(0, 1, 4))
        assert enc.e_log.max() == pytest.approx(1.0, abs=1e-6)
        norms = np.linalg.norm(enc.e_dir, axis=-1)
        assert np.abs(norms - 1.0).max() <= 1e-6

    def test_per_frame_yaw_matches_static_rotation(self):
        env = random_environment(8, 8, 16)
        yaws = np.array([0.0, 0.7, -1.9, 4.0])
        enc = encode_lighting(env, 4, 16, 16, yaw_per_frame=yaws)
        for k, yaw in enumerate(yaws):
            static = encode_lighting(rotate_env(env, yaw), 1, 16, 16)
            assert np.allclose(enc.e_ldr[k], static.e_ldr[0], atol=1e-6)
            assert np.allclose(enc.e_dir[k], static.e_dir[0], atol=1e-6)
        # e_log differs only through the shared clip-wide normalizer
        static0 = encode_lighting(rotate_env(env, yaws[1]), 1, 16, 16)
        ratio = enc.e_max / static0.e_max
        assert np.allclose(enc.e_log[1] * ratio, static0.e_log[0], atol=1e-5)

    def test_rotation_moves_content_not_directions(self):
        env = random_environment(9, 8, 16)
        enc = encode_lighting(env, 2, 16, 16, yaw_per_frame=[0.0, 1.1])
        assert np.allclose(enc.e_dir[0], enc.e_dir[1])  # fixed grid
        assert np.abs(enc.e_ldr[0] - enc.e_ldr[1]).max() > 1e-3  # content scrolled


class TestValidation:
    def test_map_invariants(self):
        with pytest.raises(InvalidInputError):
            EnvironmentMap(np.ones((1, 8, 3), dtype=np.float32))
        with pytest.raises(InvalidInputError):
            EnvironmentMap(np.ones((4, 2, 3), dtype=np.float32))
        with pytest.raises(InvalidInputError):
            EnvironmentMap(-np.ones((4, 8, 3), dtype=np.float32))

    def test_random_environment_deterministic(self):
        a = random_environment(3, 16, 32)
        b = random_environment(3, 16, 32)
        assert (a.pixels == b.pixels).all()
        assert (a.pixels >= 0).all()
