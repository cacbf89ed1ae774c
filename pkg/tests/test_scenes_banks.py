import numpy as np
import pytest

from sparse_sampler.banks import (StreamingBank, generate_bank, load_bank,
                                  save_bank, take)
from sparse_sampler.scenes import (NoiseModel, builtin_scene, draw_sample,
                                   draw_sample_batch, load_scene, noise_std,
                                   save_scene)
from sparse_sampler.images import RadianceImage, zero_motion
from sparse_sampler.scenes import SceneSpec


def _flat_scene(w=8, h=8, family="lognormal", scale=0.5):
    scene = builtin_scene("flat", w, h)
    scene.noise.family = family
    scene.noise.scale = np.full((h, w), scale)
    return scene


class TestBuiltinScenes:
    def test_flat_constant(self):
        s = builtin_scene("flat", 16, 12)
        assert np.ptp(s.ground_truth.data) == 0
        assert np.ptp(s.noise.scale) == 0

    def test_hetero_gradient_scale_ratio(self):
        s = builtin_scene("hetero-gradient", 32, 16)
        ratio = s.noise.scale[0, -1] / s.noise.scale[0, 0]
        assert ratio == pytest.approx(100.0, rel=0.01)

    def test_checker_spike_variance_concentration(self):
        s = builtin_scene("checker-spike", 64, 64)
        var = (noise_std(s) ** 2).mean(axis=-1)
        spike = s.noise.scale > 0.5
        assert spike.mean() < 0.05
        assert var[spike].sum() > 0.5 * var.sum()

    def test_unknown_name(self):
        with pytest.raises(ValueError):
            builtin_scene("nope", 8, 8)

    def test_round_trip(self, tmp_path):
        s = builtin_scene("edge", 12, 10)
        save_scene(s, tmp_path / "edge")
        back = load_scene(tmp_path / "edge")
        np.testing.assert_allclose(back.ground_truth.data, s.ground_truth.data,
                                   rtol=1e-6)
        assert back.noise.family == s.noise.family


class TestSampleDistributions:
    @pytest.mark.parametrize("family,scale", [("lognormal", 0.5),
                                              ("gaussian-clamped", 0.1),
                                              ("two-point", 0.0)])
    def test_mean_exactness(self, family, scale):
        """Sample mean converges to ground truth: 5 sigma / sqrt(N) bound."""
        scene = _flat_scene(4, 4, family, scale)
        n = 4000
        acc = np.zeros((4, 4, 3))
        for j in range(n):
            acc += draw_sample(scene, frame=0, seed=0, index=j)
        acc /= n
        gt = scene.ground_truth.data
        bound = 5 * noise_std(scene) / np.sqrt(n)
        assert (np.abs(acc - gt) <= bound + 1e-12).all()

    def test_zero_scale_degenerates_to_ground_truth(self):
        scene = _flat_scene(4, 4, "lognormal", 0.0)
        s = draw_sample(scene, 0, 0, 0)
        np.testing.assert_array_equal(s, scene.ground_truth.data)

    def test_samples_nonnegative(self):
        for family in ("lognormal", "gaussian-clamped", "two-point"):
            scene = _flat_scene(8, 8, family, 0.8)
            for j in range(16):
                assert (draw_sample(scene, 0, 1, j) >= 0).all()

    def test_batch_matches_single(self):
        scene = _flat_scene(4, 4)
        batch = draw_sample_batch(scene, np.array([0, 3]), seed=2, index=5)
        np.testing.assert_array_equal(batch[0], draw_sample(scene, 0, 2, 5))
        np.testing.assert_array_equal(batch[1], draw_sample(scene, 3, 2, 5))


class TestSampleBank:
    def test_rejects_non_power_of_two(self):
        scene = _flat_scene()
        with pytest.raises(ValueError):
            generate_bank(scene, 12, seed=0)

    def test_rejects_oversize(self):
        with pytest.raises(ValueError):
            generate_bank(_flat_scene(), 512, seed=0)

    def test_take_full_population(self):
        bank = generate_bank(_flat_scene(4, 4), 8, seed=0)
        assert take(bank, (1, 2), 8, 0).shape == (8, 3)
        assert take(bank, (1, 2), 0, 0).shape == (0, 3)

    def test_take_range_overflow(self):
        bank = generate_bank(_flat_scene(4, 4), 8, seed=0)
        with pytest.raises(ValueError):
            take(bank, (0, 0), 5, 4)

    def test_halves_average_to_full_mean(self):
        bank = generate_bank(_flat_scene(4, 4), 16, seed=3)
        a = take(bank, (2, 1), 8, 0).mean(axis=0)
        b = take(bank, (2, 1), 8, 8).mean(axis=0)
        np.testing.assert_allclose((a + b) / 2, bank.mean()[1, 2], rtol=1e-12)

    def test_disjoint_ranges_independent(self):
        """Empirical correlation between disjoint take() windows stays small."""
        scene = _flat_scene(100, 100)
        bank = generate_bank(scene, 2, seed=5)
        a = bank.samples[:, :, 0, 0].ravel()
        b = bank.samples[:, :, 1, 0].ravel()
        assert abs(np.corrcoef(a, b)[0, 1]) < 0.02

    def test_different_seeds_different_samples_same_stats(self):
        scene = _flat_scene(32, 32)
        b1 = generate_bank(scene, 16, seed=1)
        b2 = generate_bank(scene, 16, seed=2)
        assert not np.array_equal(b1.samples, b2.samples)
        # two-sample z test on the pooled per-pixel means
        m1, m2 = b1.samples.mean(), b2.samples.mean()
        se = noise_std(scene).mean() / np.sqrt(b1.samples.size / 3)
        assert abs(m1 - m2) < 3 * se * np.sqrt(2)

    def test_prefix_sum_and_sample_at(self):
        bank = generate_bank(_flat_scene(4, 4), 8, seed=0)
        counts = np.array([[0, 1, 2, 3]] * 4)
        ps = bank.prefix_sum(counts)
        np.testing.assert_allclose(ps[0, 2], bank.samples[0, 2, :2].sum(axis=0))
        np.testing.assert_array_equal(ps[0, 0], 0.0)
        at = bank.sample_at(counts)
        np.testing.assert_array_equal(at[1, 3], bank.samples[1, 3, 3])

    def test_streaming_matches_materialized(self):
        scene = _flat_scene(4, 4)
        bank = generate_bank(scene, 8, seed=7)
        stream = StreamingBank(scene, seed=7, frame=0)
        counts = np.array([[3, 1, 0, 2]] * 4)
        np.testing.assert_array_equal(stream.prefix_sum(counts),
                                      bank.prefix_sum(counts))
        np.testing.assert_array_equal(stream.sample_at(counts),
                                      bank.sample_at(counts))

    def test_round_trip(self, tmp_path):
        bank = generate_bank(_flat_scene(4, 4), 4, seed=1)
        save_bank(bank, tmp_path / "bank")
        back = load_bank(tmp_path / "bank")
        np.testing.assert_allclose(back.samples, bank.samples, rtol=1e-6)
        assert back.seed == 1
