"""Activation maps, normalization, upsampling, and mask-to-box extraction."""

from __future__ import annotations

import numpy as np
import pytest

from reprloc import (
    BBox,
    FeatureMap,
    ForegroundPredictor,
    activation_map,
    boxes_from_mask,
    localize,
    minmax_normalize,
    upsample_bilinear,
)
from conftest import TOY_TAU, TOY_W, toy_feature_map


def flood_fill_boxes(mask: np.ndarray, connectivity: int) -> set[tuple[int, int, int, int]]:
    """Independent BFS flood fill; returns the set of component boxes."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if connectivity == 4:
        offsets = [(-1, 0), (1, 0), (0, -1), (0, 1)]
    else:
        offsets = [(dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if (dr, dc) != (0, 0)]
    seen = np.zeros_like(mask)
    boxes = set()
    for r in range(h):
        for c in range(w):
            if not mask[r, c] or seen[r, c]:
                continue
            queue = [(r, c)]
            seen[r, c] = True
            rows, cols = [], []
            while queue:
                cr, cc = queue.pop()
                rows.append(cr)
                cols.append(cc)
                for dr, dc in offsets:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < h and 0 <= nc < w and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            boxes.add((min(cols), min(rows), max(cols) + 1, max(rows) + 1))
    return boxes


class TestMinmaxNormalize:
    def test_simple_triple(self):
        out, degenerate = minmax_normalize(np.array([2.0, 4.0, 6.0]))
        assert not degenerate
        assert np.allclose(out, [0.0, 0.5, 1.0])

    def test_constant_grid_is_degenerate(self):
        out, degenerate = minmax_normalize(np.array([5.0, 5.0]))
        assert degenerate
        assert np.all(out == 0.0)

    def test_order_preserved(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            grid = rng.normal(size=24)
            out, degenerate = minmax_normalize(grid)
            assert not degenerate
            assert np.array_equal(np.argsort(out, kind="stable"),
                                  np.argsort(grid, kind="stable"))
            assert out.min() == 0.0 and out.max() == 1.0

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            minmax_normalize(np.array([1.0, np.nan]))


class TestActivationMap:
    def _toy_predictor(self) -> ForegroundPredictor:
        return ForegroundPredictor(weights=np.array(TOY_W), tau=TOY_TAU)

    def test_toy_scores(self):
        # test patches (1,0) and (0,1) against the toy predictor
        fm = FeatureMap("q", np.array([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=np.float32))
        am = activation_map(fm, self._toy_predictor())
        assert am.raw.ravel() == pytest.approx(TOY_W, rel=1e-6)
        assert am.normalized.ravel() == pytest.approx([1.0, 0.0], abs=1e-12)
        assert not am.degenerate

    def test_null_predictor_is_degenerate(self):
        pred = ForegroundPredictor(weights=np.zeros(2), tau=1.0)
        am = activation_map(toy_feature_map(), pred)
        assert am.degenerate
        assert np.all(am.raw == 0.0)

    def test_per_patch_positive_scaling_invariance(self):
        rng = np.random.default_rng(12)
        data = rng.normal(size=(4, 3, 3)).astype(np.float32)
        scales = rng.uniform(0.5, 4.0, size=(3, 3)).astype(np.float32)
        pred = ForegroundPredictor(weights=rng.normal(size=4), tau=1.0)
        before = activation_map(FeatureMap("a", data), pred)
        after = activation_map(FeatureMap("a", data * scales[None]), pred)
        np.testing.assert_allclose(after.raw, before.raw, rtol=1e-5, atol=1e-7)

    def test_zero_norm_patch_scores_zero(self):
        data = np.zeros((2, 1, 2), dtype=np.float32)
        data[:, 0, 0] = [3.0, 4.0]
        pred = ForegroundPredictor(weights=np.array([1.0, 1.0]), tau=1.0)
        am = activation_map(FeatureMap("z", data), pred)
        assert am.raw[0, 1] == 0.0

    def test_dim_mismatch(self):
        pred = ForegroundPredictor(weights=np.ones(5), tau=1.0)
        with pytest.raises(ValueError):
            activation_map(toy_feature_map(), pred)


class TestUpsampleBilinear:
    def test_constant_preserved_any_size(self):
        out = upsample_bilinear(np.full((1, 1), 0.7), 5, 3)
        assert out.shape == (3, 5)
        assert np.all(out == 0.7)

    def test_closed_form_two_by_four(self):
        grid = np.array([[0.0, 1.0], [0.0, 1.0]])
        out = upsample_bilinear(grid, 4, 2)
        expected_row = [0.0, 0.25, 0.75, 1.0]
        assert np.allclose(out, [expected_row, expected_row], atol=1e-12)

    def test_identity_size_exact(self):
        rng = np.random.default_rng(2)
        grid = rng.normal(size=(5, 7))
        out = upsample_bilinear(grid, 7, 5)
        assert np.array_equal(out, grid)

    def test_bounded_by_input_range(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            grid = rng.normal(size=(3, 4))
            out = upsample_bilinear(grid, 13, 9)
            assert out.max() <= grid.max() + 1e-6
            assert out.min() >= grid.min() - 1e-6

    def test_zero_target_rejected(self):
        with pytest.raises(ValueError):
            upsample_bilinear(np.ones((2, 2)), 0, 4)


class TestBoxesFromMask:
    def test_single_blob(self):
        mask = np.zeros((5, 6), dtype=bool)
        mask[1:3, 1:4] = True  # 3 wide x 2 tall at (1, 1)
        assert boxes_from_mask(mask) == [BBox(1, 1, 4, 3)]

    def test_connectivity_semantics(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 1] = True
        mask[2, 2] = True
        assert len(boxes_from_mask(mask, connectivity=4, policy="all")) == 2
        assert len(boxes_from_mask(mask, connectivity=8, policy="all")) == 1

    def test_empty_mask(self):
        assert boxes_from_mask(np.zeros((3, 3), dtype=bool)) == []

    def test_largest_picks_max_pixel_component(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0, 0:2] = True  # 2 pixels
        mask[3:6, 3:6] = True  # 9 pixels
        assert boxes_from_mask(mask, policy="largest") == [BBox(3, 3, 6, 6)]

    def test_largest_tie_breaks_lexicographically(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[3, 3:5] = True  # 2 pixels, lower right
        mask[0, 1:3] = True  # 2 pixels, upper
        assert boxes_from_mask(mask, policy="largest") == [BBox(1, 0, 3, 1)]

    def test_all_sorted_by_area_desc(self):
        mask = np.zeros((8, 8), dtype=bool)
        mask[0, 0] = True
        mask[2:4, 2:6] = True
        mask[6:8, 0:3] = True
        boxes = boxes_from_mask(mask, policy="all")
        areas = [b.area for b in boxes]
        assert areas == sorted(areas, reverse=True)
        assert len(boxes) == 3

    @pytest.mark.parametrize("connectivity", [4, 8])
    def test_matches_flood_fill_oracle(self, connectivity):
        rng = np.random.default_rng(77)
        for _ in range(25):
            mask = rng.random((16, 16)) < 0.35
            ours = {
                b.as_tuple()
                for b in boxes_from_mask(mask, connectivity=connectivity, policy="all")
            }
            assert ours == flood_fill_boxes(mask, connectivity)


class TestLocalize:
    def _separable_fm(self) -> FeatureMap:
        # left half strong along channel 0, right half weak along channel 1
        data = np.zeros((2, 4, 4), dtype=np.float32)
        data[0, :, :2] = 2.0
        data[1, :, 2:] = 0.5
        return FeatureMap("sep", data)

    def _predictor(self) -> ForegroundPredictor:
        return ForegroundPredictor(weights=np.array([1.0, -1.0]), tau=1.0)

    def test_zero_threshold_covers_image(self):
        result = localize(self._separable_fm(), self._predictor(), 0.0, 20, 20)
        assert result.chosen_box == BBox(0, 0, 20, 20)

    def test_degenerate_map_flagged(self):
        pred = ForegroundPredictor(weights=np.zeros(2), tau=1.0)
        result = localize(self._separable_fm(), pred, 0.5, 20, 20)
        assert result.degenerate
        assert result.boxes == [] and result.chosen_box is None

    def test_threshold_nesting(self):
        fm = self._separable_fm()
        pred = self._predictor()
        previous = localize(fm, pred, 0.0, 24, 24).mask
        for theta in (0.25, 0.5, 0.75, 1.0):
            current = localize(fm, pred, theta, 24, 24).mask
            assert np.all(current <= previous)
            previous = current

    def test_threshold_one_keeps_peak(self):
        result = localize(self._separable_fm(), self._predictor(), 1.0, 24, 24)
        assert result.mask.any()

    def test_chosen_box_is_a_listed_box(self):
        result = localize(self._separable_fm(), self._predictor(), 0.5, 24, 24)
        assert result.chosen_box in result.boxes

    def test_threshold_out_of_range(self):
        with pytest.raises(ValueError):
            localize(self._separable_fm(), self._predictor(), 1.2, 24, 24)

    def test_box_scale_invariance_power_of_two(self):
        # scaling features and predictor by 0.5 is exact in binary floats
        fm = self._separable_fm()
        pred = self._predictor()
        scaled_fm = FeatureMap("sep", fm.data * 0.5)
        scaled_pred = ForegroundPredictor(weights=pred.weights * 0.5, tau=pred.tau * 0.5)
        a = localize(fm, pred, 0.5, 32, 32)
        b = localize(scaled_fm, scaled_pred, 0.5, 32, 32)
        assert a.boxes == b.boxes
        assert np.array_equal(a.mask, b.mask)
