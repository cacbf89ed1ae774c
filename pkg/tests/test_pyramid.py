import numpy as np
import pytest

from sparse_sampler.images import RadianceImage
from sparse_sampler.pyramid import (DemodMap, KernelField, build_pyramid,
                                    gather5, kernel_channels, level_dims,
                                    load_kernel_field, normalize_kernels,
                                    reconstruct, reconstruct_backward,
                                    reconstruct_core, save_kernel_field,
                                    upsample2, zero_kernel_field,
                                    DENOISE_TAPS, UPSAMPLE_TAPS)


def random_field(width, height, seed, scale=0.7):
    rng = np.random.default_rng(seed)
    kf = zero_kernel_field(width, height)
    for arr in kf.logits:
        arr += rng.normal(0, scale, arr.shape)
    return kf


class TestBuildPyramid:
    def test_constant_preserved(self):
        pyr = build_pyramid(np.full((16, 16, 3), 2.5))
        for lv in pyr.levels:
            np.testing.assert_allclose(lv, 2.5)

    def test_2x2_block_average(self):
        img = np.array([[[1.0], [2.0]], [[3.0], [4.0]]]) * np.ones(3)
        pyr = build_pyramid(img)
        np.testing.assert_allclose(pyr.levels[1][0, 0], 2.5)

    def test_4x4_level2_equals_global_mean(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 4, (4, 4, 3))
        pyr = build_pyramid(img)
        np.testing.assert_allclose(pyr.levels[2][0, 0], img.mean(axis=(0, 1)),
                                   rtol=1e-7)

    def test_mean_preserved_on_power_of_two(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 2, (32, 32, 3))
        pyr = build_pyramid(img)
        for lv in pyr.levels:
            np.testing.assert_allclose(lv.mean(axis=(0, 1)), img.mean(axis=(0, 1)),
                                       rtol=1e-5)

    def test_odd_dims_count_correct(self):
        img = np.ones((5, 7, 3))
        pyr = build_pyramid(img)
        for lv in pyr.levels:
            np.testing.assert_allclose(lv, 1.0)  # averages of actual contributors

    def test_level_dims(self):
        assert level_dims(10, 7) == [(7, 10), (4, 5), (2, 3), (1, 2), (1, 1)]


class TestNormalizeKernels:
    def test_uniform_at_zero_logits(self):
        kf = zero_kernel_field(8, 8)
        w = normalize_kernels(kf)
        np.testing.assert_allclose(w[0], 1.0 / 54)
        np.testing.assert_allclose(w[1], 1.0 / 29)
        np.testing.assert_allclose(w[4], 1.0 / 25)

    def test_saturation(self):
        kf = zero_kernel_field(4, 4)
        kf.logits[0][:, :, 12] = 20.0
        w = normalize_kernels(kf)
        assert (w[0][:, :, 12] > 0.999).all()

    def test_group_sums_to_one(self):
        kf = random_field(8, 8, seed=2)
        for level, w in enumerate(normalize_kernels(kf)):
            np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)

    def test_temporal_excluded_when_no_history(self):
        kf = random_field(8, 8, seed=3)
        w = normalize_kernels(kf, include_temporal=False)
        active = DENOISE_TAPS + UPSAMPLE_TAPS
        np.testing.assert_array_equal(w[0][:, :, active:], 0.0)
        np.testing.assert_allclose(w[0].sum(axis=-1), 1.0, atol=1e-6)

    def test_channel_layout(self):
        assert kernel_channels(0) == 54
        assert kernel_channels(2) == 29
        assert kernel_channels(4) == 25


class TestGatherPrimitives:
    def test_one_hot_center_is_identity(self):
        rng = np.random.default_rng(4)
        img = rng.uniform(0, 3, (6, 6, 3))
        w = np.zeros((6, 6, 25))
        w[:, :, 12] = 1.0
        np.testing.assert_array_equal(gather5(img, w), img)

    def test_uniform_weights_on_constant(self):
        img = np.full((5, 5, 3), 1.7)
        w = np.full((5, 5, 25), 1.0 / 25)
        np.testing.assert_allclose(gather5(img, w), 1.7)

    def test_convex_combination_bound(self):
        rng = np.random.default_rng(5)
        img = rng.uniform(0, 10, (8, 8, 3))
        w = rng.dirichlet(np.ones(25), size=(8, 8))
        out = gather5(img, w)
        # each output lies within the min/max of its clamped 5x5 neighborhood
        padded = np.pad(img, ((2, 2), (2, 2), (0, 0)), mode="edge")
        for y in range(8):
            for x in range(8):
                nb = padded[y:y + 5, x:x + 5]
                assert (out[y, x] >= nb.min(axis=(0, 1)) - 1e-12).all()
                assert (out[y, x] <= nb.max(axis=(0, 1)) + 1e-12).all()

    def test_upsample_one_hot_nearest(self):
        rng = np.random.default_rng(6)
        coarse = rng.uniform(0, 2, (3, 3, 3))
        w = np.zeros((6, 6, 4))
        w[:, :, 0] = 1.0
        out = upsample2(coarse, w)
        for y in range(6):
            for x in range(6):
                np.testing.assert_array_equal(out[y, x], coarse[y // 2, x // 2])

    def test_upsample_uniform_on_constant(self):
        coarse = np.full((2, 2, 3), 3.3)
        w = np.full((4, 4, 4), 0.25)
        np.testing.assert_allclose(upsample2(coarse, w), 3.3)

    def test_upsample_convex_bound(self):
        rng = np.random.default_rng(7)
        coarse = rng.uniform(0, 5, (3, 3, 3))
        w = rng.dirichlet(np.ones(4), size=(6, 6))
        out = upsample2(coarse, w)
        assert (out >= coarse.min() - 1e-12).all()
        assert (out <= coarse.max() + 1e-12).all()


class TestReconstruct:
    def test_identity_configuration(self):
        """Temporal and upsample logits masked, one-hot center denoise at
        full resolution reproduces the input."""
        rng = np.random.default_rng(8)
        img = rng.uniform(0.1, 4.0, (16, 16, 3))
        kf = zero_kernel_field(16, 16)
        kf.logits[0][:, :, 12] = 60.0  # center denoise tap dominates
        out, _ = reconstruct_core(img, kf, None, None)
        np.testing.assert_allclose(out, img, rtol=1e-6)

    def test_constant_input_any_kernels(self):
        kf = random_field(12, 12, seed=9)
        img = np.full((12, 12, 3), 0.8)
        prev = np.full((12, 12, 3), 0.8)
        out, _ = reconstruct_core(img, kf, prev, None)
        np.testing.assert_allclose(out, 0.8, rtol=1e-9)

    def test_convex_hull_property(self):
        rng = np.random.default_rng(10)
        for trial in range(20):
            kf = random_field(8, 8, seed=100 + trial, scale=1.5)
            img = rng.uniform(0, 6, (8, 8, 3))
            prev = rng.uniform(0, 6, (8, 8, 3))
            out, _ = reconstruct_core(img, kf, prev, None)
            lo = min(img.min(), prev.min())
            hi = max(img.max(), prev.max())
            assert (out >= lo - 1e-9).all() and (out <= hi + 1e-9).all()

    def test_demod_round_trip_on_identity_path(self):
        rng = np.random.default_rng(11)
        img = rng.uniform(0.1, 2.0, (8, 8, 3))
        demod = rng.uniform(0.05, 3.0, (8, 8, 3))
        kf = zero_kernel_field(8, 8)
        kf.logits[0][:, :, 12] = 60.0
        out, _ = reconstruct_core(img, kf, None, demod)
        np.testing.assert_allclose(out, img, rtol=1e-6)

    def test_demod_preserves_texture_contrast(self):
        """Demodulating by the albedo keeps texture through a blurring
        filter: output correlates better with the albedo pattern."""
        rng = np.random.default_rng(12)
        albedo = np.where((np.arange(16)[:, None] // 4 + np.arange(16)[None, :] // 4) % 2 == 0,
                          0.9, 0.2)[:, :, None] * np.ones(3)
        noisy = albedo * 1.4 * rng.uniform(0.9, 1.1, (16, 16, 3))
        kf = zero_kernel_field(16, 16)  # uniform weights blur heavily
        out_plain, _ = reconstruct_core(noisy, kf, None, None)
        out_demod, _ = reconstruct_core(noisy, kf, None, albedo)

        def corr(a):
            return np.corrcoef(a.mean(-1).ravel(), albedo.mean(-1).ravel())[0, 1]

        assert corr(out_demod) > corr(out_plain)

    def test_reconstruct_surface_api(self):
        rng = np.random.default_rng(13)
        img = RadianceImage(rng.uniform(0, 2, (8, 8, 3)))
        kf = random_field(8, 8, seed=14)
        out = reconstruct(build_pyramid(img), kf)
        assert out.data.shape == (8, 8, 3)


class TestBackward:
    def test_zero_upstream_zero_grads(self):
        kf = random_field(8, 8, seed=15)
        rng = np.random.default_rng(16)
        img = rng.uniform(0, 2, (8, 8, 3))
        out, tape = reconstruct_core(img, kf, img.copy(), np.ones((8, 8, 3)))
        g = reconstruct_backward(tape, np.zeros_like(out))
        for gl in g.logits:
            np.testing.assert_array_equal(gl, 0.0)
        np.testing.assert_array_equal(g.demod, 0.0)
        np.testing.assert_array_equal(g.input, 0.0)

    def test_impulse_confined_to_footprint(self):
        """A single-pixel upstream impulse only reaches logits whose gather
        footprint covers that pixel."""
        n = 16
        kf = random_field(n, n, seed=17)
        rng = np.random.default_rng(18)
        img = rng.uniform(0.1, 2, (n, n, 3))
        out, tape = reconstruct_core(img, kf, None, None)
        up = np.zeros_like(out)
        up[2, 2] = 1.0
        g = reconstruct_backward(tape, up)
        # full-resolution denoise logits: only pixel (2, 2) predicts for itself
        nz = np.nonzero(np.abs(g.logits[0]).sum(axis=-1))
        assert set(zip(*nz)) == {(2, 2)}
        # level-1 logits live within the pooled neighborhood of the impulse
        nz1 = np.abs(g.logits[1]).sum(axis=-1)
        assert nz1[1, 1] != 0
        assert nz1[6:, 6:].max() == 0

    def test_gradcheck_all_parameters(self):
        """Central differences confirm every logit and demod gradient on a
        random instance (scale-aware relative error)."""
        rng = np.random.default_rng(19)
        h = w = 8
        noisy = rng.uniform(0.01, 3.0, (h, w, 3))
        prev = rng.uniform(0.01, 3.0, (h, w, 3))
        demod = rng.uniform(0.2, 2.0, (h, w, 3))
        kf = random_field(w, h, seed=20)
        up = rng.normal(0, 1.0, (h, w, 3))
        out, tape = reconstruct_core(noisy, kf, prev, demod)
        g = reconstruct_backward(tape, up)

        def loss():
            o, _ = reconstruct_core(noisy, kf, prev, demod)
            return float((up * o).sum())

        eps = 1e-5
        gscale = max(max(np.abs(gl).max() for gl in g.logits), 1e-12)
        for l in range(5):
            arr = kf.logits[l]
            for idx in [tuple(rng.integers(0, s) for s in arr.shape)
                        for _ in range(10)]:
                old = arr[idx]
                arr[idx] = old + eps
                lp = loss()
                arr[idx] = old - eps
                lm = loss()
                arr[idx] = old
                fd = (lp - lm) / (2 * eps)
                an = g.logits[l][idx]
                assert abs(an - fd) <= 1e-3 * max(abs(fd), abs(an), 1e-3 * gscale)

    def test_input_gradient_exact(self):
        rng = np.random.default_rng(21)
        img = rng.uniform(0.05, 2, (6, 6, 3))
        kf = random_field(6, 6, seed=22)
        up = rng.normal(0, 1, (6, 6, 3))
        out, tape = reconstruct_core(img, kf, None, None)
        g = reconstruct_backward(tape, up)
        eps = 1e-6
        for idx in [tuple(rng.integers(0, s) for s in img.shape) for _ in range(20)]:
            old = img[idx]
            img[idx] = old + eps
            lp = float((up * reconstruct_core(img, kf, None, None)[0]).sum())
            img[idx] = old - eps
            lm = float((up * reconstruct_core(img, kf, None, None)[0]).sum())
            img[idx] = old
            fd = (lp - lm) / (2 * eps)
            assert abs(g.input[idx] - fd) <= 1e-5 * max(abs(fd), 1e-6)

    def test_sparse_input_optimization_improves(self):
        """With 90 percent of pixels zeroed, optimizing the kernel logits by
        a moment-based update steadily reduces reconstruction error."""
        from sparse_sampler.optimize import OptimState, adamw_update

        rng = np.random.default_rng(23)
        n = 16
        ref = rng.uniform(0.5, 1.5, (n, n, 3))
        mask = rng.uniform(size=(n, n)) < 0.10
        sparse = np.where(mask[:, :, None], ref / 0.10, 0.0)
        kf = zero_kernel_field(n, n)
        params = {f"logits{l}": kf.logits[l] for l in range(5)}
        state = OptimState(params, {k: np.zeros_like(v) for k, v in params.items()},
                           {k: np.zeros_like(v) for k, v in params.items()})
        errs = []
        for it in range(80):
            out, tape = reconstruct_core(sparse, kf, None, None)
            resid = out - ref
            errs.append(float(np.abs(resid).mean()))
            g = reconstruct_backward(tape, np.sign(resid) / resid.size)
            adamw_update(state, {f"logits{l}": g.logits[l] for l in range(5)},
                         lr=0.1, beta1=0.8, beta2=0.985, weight_decay=0.0)
        assert np.isfinite(errs).all()
        assert errs[-1] < errs[0] * 0.9
        # median over windows decreases monotonically
        meds = [np.median(errs[i:i + 20]) for i in (0, 20, 40, 60)]
        assert all(b <= a for a, b in zip(meds, meds[1:]))


class TestPersistence:
    def test_round_trip(self, tmp_path):
        kf = random_field(10, 6, seed=24)
        path = tmp_path / "field.kf"
        save_kernel_field(kf, path)
        back = load_kernel_field(path)
        for a, b in zip(kf.logits, back.logits):
            np.testing.assert_array_equal(a, b)

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "bad.kf"
        path.write_bytes(b"not a kernel field")
        with pytest.raises(ValueError):
            load_kernel_field(path)
