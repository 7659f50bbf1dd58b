import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from keyprop import tensor as T
from keyprop.flow import (
    FlowField,
    affine_flow,
    bilinear_sample,
    degrade_flow,
    fb_consistency,
    fill_masked_flow,
    pixel_grid,
    resize_flow,
    resize_map,
    valid_region,
    warp,
)
from keyprop.gradcheck import check_gradients
from keyprop.tensor import DimensionError, Tensor


def rotation(theta, h, w, shift=(0.0, 0.0), scale=1.0):
    c, s = np.cos(theta) * scale, np.sin(theta) * scale
    cx, cy = (w - 1) / 2, (h - 1) / 2
    lin = np.array([[c, -s], [s, c]])
    t = np.array([cx, cy]) - lin @ np.array([cx, cy]) + np.array(shift)
    return np.concatenate([lin, t[:, None]], axis=1)


def interior(h, w, margin):
    m = np.zeros((h, w), bool)
    m[margin : h - margin, margin : w - margin] = True
    return m


class TestBilinear:
    def test_integer_coordinates_are_exact(self, rng):
        feat = rng.standard_normal((6, 7, 3))
        pos = np.stack(np.meshgrid(rng.integers(0, 7, 5), rng.integers(0, 6, 4)), -1).astype(float)
        got = bilinear_sample(Tensor(feat), Tensor(pos)).data
        np.testing.assert_array_equal(got, feat[pos[..., 1].astype(int), pos[..., 0].astype(int)])

    def test_midpoint_averages(self):
        feat = np.arange(4.0).reshape(2, 2, 1)
        got = bilinear_sample(Tensor(feat), Tensor(np.array([[[0.5, 0.5]]]))).data
        assert got[0, 0, 0] == pytest.approx(1.5)

    def test_outside_clamps_to_border(self, rng):
        feat = rng.standard_normal((4, 4, 2))
        got = bilinear_sample(Tensor(feat), Tensor(np.array([[[-3.0, 1.0], [9.0, 10.0]]]))).data
        np.testing.assert_array_equal(got[0, 0], feat[1, 0])
        np.testing.assert_array_equal(got[0, 1], feat[3, 3])

    def test_batch_mismatch(self):
        with pytest.raises(DimensionError):
            bilinear_sample(Tensor(np.ones((2, 4, 4, 1))), Tensor(np.ones((3, 4, 4, 2))))

    def test_gradcheck(self, rng):
        feat = Tensor(rng.standard_normal((5, 5, 2)), requires_grad=True)
        pos = Tensor(rng.integers(0, 4, (3, 3, 2)) + rng.uniform(0.2, 0.8, (3, 3, 2)), requires_grad=True)
        w = Tensor(rng.standard_normal((3, 3, 2)))
        assert check_gradients(lambda: T.sum(T.mul(bilinear_sample(feat, pos), w)), [feat, pos]) < 1e-6

    @given(st.floats(0, 6), st.floats(0, 5))
    def test_linear_function_reproduced(self, x, y):
        # bilinear interpolation is exact on affine functions
        grid = pixel_grid(6, 7)
        feat = (2 * grid[..., :1] - 3 * grid[..., 1:] + 1).astype(float)
        got = bilinear_sample(Tensor(feat), Tensor(np.array([[[x, y]]]))).data[0, 0, 0]
        assert got == pytest.approx(2 * x - 3 * y + 1, abs=1e-9)


class TestConsistency:
    def test_affine_pair_is_consistent(self):
        h = w = 48
        fwd, bwd = affine_flow(rotation(0.1, h, w, (1.5, -2.0), 1.05), h, w)
        fb = fb_consistency(fwd, bwd).data[..., 0]
        inside = valid_region(fwd, margin=2)
        assert fb[inside & interior(h, w, 4)].max() < 1e-3

    def test_mismatched_resolution(self):
        with pytest.raises(DimensionError):
            fb_consistency(FlowField(np.zeros((4, 4, 2))), FlowField(np.zeros((5, 4, 2))))

    def test_inconsistent_pair_detected(self):
        fwd = FlowField(np.full((8, 8, 2), 1.0))
        assert np.allclose(fb_consistency(fwd, fwd).data, 2 * np.sqrt(2))

    def test_warp_by_translation(self, rng):
        img = rng.standard_normal((6, 6, 1))
        off = np.zeros((6, 6, 2))
        off[..., 0] = 1.0
        out = warp(img, FlowField(off))
        np.testing.assert_array_equal(out[:, :5], img[:, 1:])

    def test_affine_flow_rejects_singular(self):
        with pytest.raises(ValueError):
            affine_flow(np.array([[1.0, 2.0, 0.0], [2.0, 4.0, 0.0]]), 4, 4)


class TestInfill:
    def _hole(self, h, w):
        m = np.zeros((h, w, 1))
        m[10:22, 8:26] = 1
        m[5:9, 20:24] = 1
        return m

    def test_constant_flow_recovered(self):
        off = np.zeros((32, 32, 2))
        off[..., 0], off[..., 1] = 2.5, -1.25
        mask = self._hole(32, 32)
        corrupted = off.copy()
        corrupted[mask[..., 0] > 0] = 40.0
        filled = fill_masked_flow(FlowField(corrupted), mask)
        assert np.abs(filled.offsets - off).max() < 1e-3

    def test_affine_flow_recovered(self):
        fwd, _ = affine_flow(rotation(0.08, 32, 32, (0.7, 1.1), 0.97), 32, 32)
        mask = self._hole(32, 32)
        corrupted = fwd.offsets.copy()
        corrupted[mask[..., 0] > 0] = 0.0
        filled = fill_masked_flow(FlowField(corrupted), mask)
        assert np.abs(filled.offsets - fwd.offsets).max() < 1e-3

    def test_known_pixels_untouched(self, rng):
        off = rng.standard_normal((16, 16, 2))
        mask = self._hole(16, 16)[:16, :16]
        filled = fill_masked_flow(FlowField(off), mask)
        keep = mask[..., 0] == 0
        np.testing.assert_array_equal(filled.offsets[keep], off[keep])

    def test_everything_masked_is_degenerate(self):
        filled = fill_masked_flow(FlowField(np.ones((8, 8, 2))), np.ones((8, 8, 1)))
        assert filled.degenerate
        np.testing.assert_array_equal(filled.offsets, 0.0)

    def test_nothing_masked_is_identity(self, rng):
        off = rng.standard_normal((8, 8, 2))
        np.testing.assert_array_equal(fill_masked_flow(FlowField(off), np.zeros((8, 8, 1))).offsets, off)


class TestResize:
    @pytest.mark.parametrize("new", [(16, 16), (8, 24), (64, 32)])
    def test_constant_flow_scales_exactly(self, new):
        off = np.zeros((32, 32, 2))
        off[..., 0], off[..., 1] = 3.0, -2.0
        out = resize_flow(FlowField(off), *new)
        assert out.resolution == new
        np.testing.assert_array_equal(out.offsets[..., 0], 3.0 * new[1] / 32)
        np.testing.assert_array_equal(out.offsets[..., 1], -2.0 * new[0] / 32)

    def test_same_size_is_copy(self, rng):
        off = rng.standard_normal((8, 8, 2))
        out = resize_flow(FlowField(off), 8, 8)
        np.testing.assert_array_equal(out.offsets, off)
        assert out.offsets is not off

    def test_invalid_extent(self):
        with pytest.raises(ValueError):
            resize_flow(FlowField(np.zeros((4, 4, 2))), 0, 4)

    def test_resize_map_preserves_constants(self):
        np.testing.assert_allclose(resize_map(np.full((2, 12, 12, 3), 0.7), 4, 6), 0.7)


class TestDegrade:
    def test_noise_bounded_and_seeded(self):
        off = np.zeros((8, 8, 2))
        a = degrade_flow(FlowField(off), 0.5, np.random.default_rng(3))
        b = degrade_flow(FlowField(off), 0.5, np.random.default_rng(3))
        np.testing.assert_array_equal(a.offsets, b.offsets)
        assert np.abs(a.offsets).max() > 0
