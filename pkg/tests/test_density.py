import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparse_sampler.density import (DensityMap, DitherMask, allocate,
                                    holdout_taken, load_mask, normalize_density,
                                    save_mask, uniform_density,
                                    void_cluster_mask)


class TestNormalizeDensity:
    def test_constant_scores_give_uniform(self):
        d = normalize_density(np.zeros((4, 6)), budget=1.0)
        np.testing.assert_allclose(d.spp, 1.0)

    def test_dominant_score_closed_form(self):
        # one overwhelming score on 2x2 at budget 1:
        # floor 1/8 everywhere, winner gets all of 7/8 * 4
        scores = np.array([[1e4, 0.0], [0.0, 0.0]])
        d = normalize_density(scores, budget=1.0)
        assert d.spp[0, 0] == pytest.approx(0.125 + 0.875 * 4, rel=1e-9)
        assert d.spp[0, 1] == pytest.approx(0.125, rel=1e-9)

    @given(st.integers(0, 10_000), st.floats(0.2, 4.0))
    @settings(max_examples=30, deadline=None)
    def test_sum_property(self, seed, budget):
        rng = np.random.default_rng(seed)
        scores = rng.normal(0, 3, (7, 5))
        d = normalize_density(scores, budget)
        total = budget * 35
        assert abs(d.spp.sum() - total) <= 1e-4 * total
        assert d.spp.min() >= budget / 8 * (1 - 1e-12)

    def test_rejects_nonfinite_scores(self):
        scores = np.zeros((2, 2))
        scores[0, 0] = np.inf
        with pytest.raises(ValueError):
            normalize_density(scores, 1.0)

    def test_rejects_bad_budget(self):
        with pytest.raises(ValueError):
            normalize_density(np.zeros((2, 2)), 0.0)


class TestVoidClusterMask:
    def test_rank_is_permutation(self):
        mask = void_cluster_mask(16, seed=0)
        np.testing.assert_array_equal(np.sort(mask.rank.ravel()), np.arange(256))

    def test_threshold_selects_exact_count(self):
        mask = void_cluster_mask(16, seed=1)
        assert (mask.rank < 128).sum() == 128

    def test_unsupported_size(self):
        with pytest.raises(ValueError):
            void_cluster_mask(17, seed=0)

    def test_deterministic_per_seed(self):
        a = void_cluster_mask(16, seed=3)
        b = void_cluster_mask(16, seed=3)
        np.testing.assert_array_equal(a.rank, b.rank)

    def test_blue_noise_spectrum(self):
        """Thresholded points carry less low-frequency energy than white
        noise at equal density, averaged over seeds (FFT oracle)."""
        t = 32
        keep = (t * t) // 10
        low_vc, low_wn = 0.0, 0.0
        for seed in range(10):
            mask = void_cluster_mask(t, seed=seed)
            pts = (mask.rank < keep).astype(np.float64)
            rng = np.random.default_rng(1000 + seed)
            white = np.zeros(t * t)
            white[rng.choice(t * t, keep, replace=False)] = 1.0
            white = white.reshape(t, t)
            for pat, acc in ((pts, "vc"), (white, "wn")):
                spec = np.abs(np.fft.fft2(pat - pat.mean())) ** 2
                fy = np.fft.fftfreq(t)[:, None]
                fx = np.fft.fftfreq(t)[None, :]
                low = np.hypot(fy, fx) < 0.15
                low[0, 0] = False
                energy = spec[low].sum() / spec.sum()
                if acc == "vc":
                    low_vc += energy
                else:
                    low_wn += energy
        assert low_vc < low_wn

    def test_png_round_trip(self, tmp_path):
        mask = void_cluster_mask(16, seed=5)
        save_mask(mask, tmp_path / "m.png")
        back = load_mask(tmp_path / "m.png")
        np.testing.assert_array_equal(back.rank, mask.rank)

    def test_rejects_non_permutation(self):
        with pytest.raises(ValueError):
            DitherMask(np.zeros((4, 4), dtype=np.int64))


class TestAllocate:
    def test_integer_density_no_holdouts(self):
        d = uniform_density(6, 6, 2.0)
        alloc = allocate(d, "stochastic", frame=0, seed=0)
        np.testing.assert_array_equal(alloc.base, 2)
        np.testing.assert_array_equal(alloc.frac, 0.0)
        assert not alloc.taken.any()

    def test_stochastic_holdout_fraction(self):
        # binomial concentration: 0.5 +- 0.005 over ~1e5 pixels
        d = uniform_density(400, 250, 0.5)
        alloc = allocate(d, "stochastic", frame=0, seed=0)
        assert abs(alloc.taken.mean() - 0.5) < 0.005

    def test_dithered_per_tile_count(self):
        t = 64
        mask = void_cluster_mask(t, seed=0)
        d = uniform_density(t, t, 0.5)
        alloc = allocate(d, "dithered", mask=mask, frame=0, seed=0)
        assert alloc.taken.sum() == t * t // 2

    def test_dithered_requires_mask(self):
        d = uniform_density(4, 4, 0.5)
        with pytest.raises(ValueError):
            allocate(d, "dithered")

    def test_frame_shift_decorrelates(self):
        mask = void_cluster_mask(16, seed=0)
        d = uniform_density(16, 16, 0.5)
        a0 = allocate(d, "dithered", mask=mask, frame=0)
        a1 = allocate(d, "dithered", mask=mask, frame=1)
        assert not np.array_equal(a0.taken, a1.taken)
        assert a1.taken.sum() == a0.taken.sum()

    def test_marginal_inclusion_frequency(self):
        """Extra-sample inclusion frequency approaches the fractional part
        within 3 sigma binomial bounds."""
        d = uniform_density(8, 8, 0.3)
        n = 2000
        hits = np.zeros((8, 8))
        for f in range(n):
            hits += allocate(d, "stochastic", frame=f, seed=1).taken
        p = 0.3
        bound = 3 * np.sqrt(p * (1 - p) / n)
        assert (np.abs(hits / n - p) <= bound).mean() > 0.99

    def test_take_rules(self):
        u = np.array([[0.1, 0.6, 0.95]])
        frac = np.array([[0.5, 0.5, 0.5]])
        np.testing.assert_array_equal(holdout_taken("stochastic", u, frac),
                                      [[True, False, False]])
        np.testing.assert_array_equal(holdout_taken("relaxed", u, frac),
                                      [[False, True, True]])

    def test_budget_conservation_in_expectation(self):
        d = uniform_density(50, 50, 0.7)
        total = 0
        n = 400
        for f in range(n):
            alloc = allocate(d, "stochastic", frame=f, seed=2)
            total += alloc.base.sum() + alloc.taken.sum()
        expect = 0.7 * 2500
        se = np.sqrt(0.7 * 0.3 * 2500 / n)
        assert abs(total / n - expect) < 4 * se
