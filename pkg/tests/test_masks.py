"""Tests for foreground outlines and blend masks."""

import numpy as np
import pytest


class TestForegroundOutline:

    def test_largest_component(self):
        from core.masks import foreground_outline

        image = np.full((20, 20), 0.05)
        image[2:10, 2:10] = 0.8
        image[15:17, 15:17] = 0.8
        outline = foreground_outline(image)

        assert outline[2:10, 2:10].all()
        assert not outline[15:17, 15:17].any()

    def test_zero_image(self):
        from core.exceptions import EmptyForegroundError
        from core.masks import foreground_outline

        with pytest.raises(EmptyForegroundError):
            foreground_outline(np.zeros((5, 5)))

    def test_uniform_positive_is_all_foreground(self):
        from core.masks import foreground_outline

        assert foreground_outline(np.full((1, 4, 4), 0.5)).all()


class TestMaskSpec:

    def test_resolve_scales_to_larger_side(self):
        from core.masks import MaskSpec

        assert MaskSpec(M=128, N=128, reference_side=1024).resolve(640, 512) == (80, 80)
        assert MaskSpec(M=4, N=2, reference_side=None).resolve(640, 512) == (4, 2)


class TestBuildMask:

    def test_rings_step_by_one_over_m(self):
        from core.boxes import BBox
        from core.masks import MaskSpec, build_mask

        mask = build_mask(BBox(10, 10, 4, 4), (30, 30), MaskSpec(M=4, N=4, reference_side=None))

        assert np.all(mask[10:14, 10:14] == 1.0)
        assert [mask[11, 14], mask[11, 15], mask[11, 16], mask[11, 17]] == [0.75, 0.5, 0.25, 0.0]
        assert mask[9, 9] == 0.75
        assert mask[0, 0] == 0.0

    def test_zero_band_is_box_indicator(self):
        from core.boxes import BBox
        from core.masks import MaskSpec, build_mask

        mask = build_mask(BBox(3, 4, 5, 2), (12, 12), MaskSpec(M=0, N=0, reference_side=None))
        expected = np.zeros((12, 12))
        expected[4:6, 3:8] = 1.0
        np.testing.assert_array_equal(mask, expected)

    def test_values_bounded_and_monotone_in_ring(self):
        from core.boxes import BBox
        from core.masks import MaskSpec, build_mask, chessboard_distance

        bbox = BBox(7, 5, 6, 9)
        mask = build_mask(bbox, (32, 24), MaskSpec(M=6, N=3, reference_side=None))
        ring = chessboard_distance(bbox, (32, 24))

        assert mask.min() >= 0.0 and mask.max() <= 1.0
        for r in range(1, 8):
            assert np.all(mask[ring == r] <= mask[ring == r - 1].min())

    def test_box_outside_image(self):
        from core.boxes import BBox
        from core.exceptions import ShapeError
        from core.masks import MaskSpec, build_mask

        with pytest.raises(ShapeError):
            build_mask(BBox(25, 0, 10, 4), (30, 30), MaskSpec(reference_side=None))

    def test_overlap_cut_and_ramp(self):
        from core.boxes import BBox
        from core.masks import MaskSpec, build_mask

        foreground = np.zeros((30, 40), dtype=bool)
        foreground[:, :20] = True
        mask = build_mask(BBox(12, 10, 4, 4), (30, 40), MaskSpec(M=8, N=4, reference_side=None), foreground)

        assert np.all(mask[:, 20:] == 0.0)
        assert mask[11, 19] == pytest.approx(0.5 * 0.25)
        assert mask[11, 16] == pytest.approx(0.875)
        assert np.all(mask[10:14, 12:16] == 1.0)

    def test_overlap_inside_foreground_is_unchanged(self):
        from core.boxes import BBox
        from core.masks import MaskSpec, build_mask

        spec = MaskSpec(M=3, N=2, reference_side=None)
        bbox = BBox(8, 8, 3, 3)
        np.testing.assert_array_equal(
            build_mask(bbox, (24, 24), spec, np.ones((24, 24), dtype=bool)), build_mask(bbox, (24, 24), spec)
        )


class TestBuildMaskProperties:
    """Randomized boxes, band widths and foregrounds checked against direct per-pixel rules."""

    @staticmethod
    def _case(rng):
        from core.boxes import BBox

        height, width = int(rng.integers(8, 25)), int(rng.integers(8, 25))
        x, y = int(rng.integers(0, width - 1)), int(rng.integers(0, height - 1))
        w, h = int(rng.integers(1, width - x + 1)), int(rng.integers(1, height - y + 1))
        M, N = (int(v) for v in rng.choice([0, 2, 4, 8], size=2))
        foreground = np.zeros((height, width), dtype=bool)
        top, left = int(rng.integers(0, height)), int(rng.integers(0, width))
        foreground[top:top + int(rng.integers(1, height + 1)), left:left + int(rng.integers(1, width + 1))] = True
        return BBox(x, y, w, h), (height, width), M, N, foreground

    def test_randomized_rings_and_ramps(self):
        from core.masks import MaskSpec, build_mask

        rng = np.random.default_rng(20)
        for case in range(500):
            bbox, dims, M, N, foreground = self._case(rng)
            spec = MaskSpec(M=M, N=N, reference_side=None)
            height, width = dims
            rows = np.arange(height)[:, None]
            cols = np.arange(width)[None, :]
            ring = np.maximum(
                np.maximum(np.maximum(bbox.x - cols, cols - (bbox.x + bbox.w - 1)), 0),
                np.maximum(np.maximum(bbox.y - rows, rows - (bbox.y + bbox.h - 1)), 0),
            )
            prior = (ring == 0).astype(float) if M == 0 else np.clip(1.0 - ring / M, 0.0, 1.0)

            plain = build_mask(bbox, dims, spec)
            np.testing.assert_allclose(plain, prior, atol=1e-12, err_msg=f"case {case}")
            assert np.all(plain[ring == 0] == 1.0)

            cut = build_mask(bbox, dims, spec, foreground)
            right_or_below = (cols + 0.5 >= bbox.x + bbox.w / 2.0) | (rows + 0.5 >= bbox.y + bbox.h / 2.0)
            clipped = (prior > 0) & ~foreground & right_or_below
            assert np.all(cut[clipped] == 0.0), case
            if not clipped.any():
                np.testing.assert_array_equal(cut, plain)
                continue

            cr, cc = np.nonzero(clipped)
            distance = np.sqrt((rows[..., None] - cr) ** 2 + (cols[..., None] - cc) ** 2).min(axis=-1)
            ramp = np.ones_like(prior) if N == 0 else np.minimum(np.floor(distance), N) / N
            expected = np.where(clipped, 0.0, prior * ramp)
            np.testing.assert_allclose(cut, expected, atol=1e-12, err_msg=f"case {case}")
            assert np.all(cut <= plain + 1e-12)
