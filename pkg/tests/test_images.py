import os
import struct
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparse_sampler.images import (LdrImage, MotionField, RadianceImage,
                                   read_pfm, read_png_srgb, warp, warp_array,
                                   warp_backward, write_pfm, write_png_srgb,
                                   zero_motion)


def _img(data):
    return RadianceImage(np.asarray(data, dtype=np.float64))


class TestContainers:
    def test_rejects_negative_radiance(self):
        with pytest.raises(ValueError):
            _img(np.full((2, 2, 3), -1.0))

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            _img(np.full((2, 2, 3), np.nan))

    def test_rejects_wrong_channel_count(self):
        with pytest.raises(ValueError):
            RadianceImage(np.zeros((2, 2, 4)))

    def test_ldr_range_enforced(self):
        with pytest.raises(ValueError):
            LdrImage(np.full((2, 2, 3), 1.5))


class TestWarp:
    def test_zero_motion_is_identity(self):
        rng = np.random.default_rng(0)
        img = _img(rng.uniform(0, 5, (6, 8, 3)))
        out, validity = warp(img, zero_motion(8, 6))
        np.testing.assert_allclose(out.data, img.data)
        np.testing.assert_allclose(validity, 1.0)

    def test_integer_shift_on_interior(self):
        rng = np.random.default_rng(1)
        img = _img(rng.uniform(0, 5, (6, 10, 3)))
        motion = MotionField(np.tile([3.0, 0.0], (6, 10, 1)))
        out, _ = warp(img, motion)
        np.testing.assert_allclose(out.data[:, :7], img.data[:, 3:])

    def test_out_of_bounds_gives_zero_and_invalid(self):
        img = _img(np.ones((4, 4, 3)))
        motion = MotionField(np.tile([100.0, 0.0], (4, 4, 1)))
        out, validity = warp(img, motion)
        np.testing.assert_array_equal(out.data, 0.0)
        np.testing.assert_array_equal(validity, 0.0)

    def test_linear_in_image(self):
        rng = np.random.default_rng(2)
        a = rng.uniform(0, 3, (5, 5, 3))
        b = rng.uniform(0, 3, (5, 5, 3))
        motion = rng.uniform(-1.5, 1.5, (5, 5, 2))
        wa, _ = warp_array(a, motion)
        wb, _ = warp_array(b, motion)
        wab, _ = warp_array(2.0 * a + 3.0 * b, motion)
        np.testing.assert_allclose(wab, 2.0 * wa + 3.0 * wb, rtol=1e-6)

    def test_backward_is_transpose(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(0, 2, (6, 7, 3))
        motion = rng.uniform(-2, 2, (6, 7, 2))
        gout = rng.normal(0, 1, (6, 7, 3))
        out, _ = warp_array(img, motion)
        gin = warp_backward(gout, motion)
        # <warp(x), g> == <x, warp^T(g)>
        assert np.isclose((out * gout).sum(), (img * gin).sum())


class TestPfm:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(4)
        img = _img(rng.uniform(0, 100, (4, 4, 3)).astype(np.float32))
        path = tmp_path / "x.pfm"
        write_pfm(img, path)
        back = read_pfm(path)
        np.testing.assert_array_equal(back.data, img.data)

    def test_grayscale_header_rejected(self, tmp_path):
        path = tmp_path / "gray.pfm"
        path.write_bytes(b"Pf\n2 2\n-1.0\n" + b"\x00" * 16)
        with pytest.raises(ValueError, match="non-3-channel"):
            read_pfm(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.pfm"
        path.write_bytes(b"XX\n2 2\n-1.0\n" + b"\x00" * 48)
        with pytest.raises(ValueError, match="malformed"):
            read_pfm(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "short.pfm"
        path.write_bytes(b"PF\n4 4\n-1.0\n" + b"\x00" * 10)
        with pytest.raises(ValueError, match="truncated"):
            read_pfm(path)

    def test_negative_scale_is_little_endian(self, tmp_path):
        payload = struct.pack("<f", 2.5) * 3
        path = tmp_path / "le.pfm"
        path.write_bytes(b"PF\n1 1\n-1.0\n" + payload)
        img = read_pfm(path)
        np.testing.assert_array_equal(img.data, 2.5)

    @given(st.integers(0, 2 ** 31))
    @settings(max_examples=20, deadline=None)
    def test_round_trip_random_values(self, seed):
        rng = np.random.default_rng(seed)
        data = rng.uniform(0, 1e6, (3, 5, 3)).astype(np.float32)
        with tempfile.TemporaryDirectory() as d:
            path = os.path.join(d, "r.pfm")
            write_pfm(_img(data), path)
            np.testing.assert_array_equal(read_pfm(path).data, np.float64(data))


class TestPng:
    def test_zero_image_all_zero_bytes(self, tmp_path):
        path = tmp_path / "z.png"
        write_png_srgb(LdrImage(np.zeros((3, 3, 3))), path)
        np.testing.assert_array_equal(read_png_srgb(path).data, 0.0)

    def test_one_image_all_255(self, tmp_path):
        path = tmp_path / "o.png"
        write_png_srgb(LdrImage(np.ones((3, 3, 3))), path)
        np.testing.assert_array_equal(read_png_srgb(path).data, 1.0)

    def test_half_rounds_up_to_128(self, tmp_path):
        path = tmp_path / "h.png"
        write_png_srgb(LdrImage(np.full((2, 2, 3), 0.5)), path)
        np.testing.assert_array_equal(read_png_srgb(path).data * 255, 128.0)
