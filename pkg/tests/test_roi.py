import math

import numpy as np
import pytest

from gaec.grid import PartitionSpec
from gaec.roi import (Bounds, HeatmapParams, PatchClass, PatchClassMap, classify_patches,
                      gaussian_heatmap, heatmap_series, read_mask, read_points, roi_ratio,
                      threshold_map, write_mask, write_points)


def test_bounds_defaults_and_order():
    b = Bounds(0.1)
    assert b.as_tuple() == (0.1, 0.1, 0.1)
    assert Bounds(0.1, 0.2).background == 0.2
    with pytest.raises(ValueError):
        Bounds(0.2, 0.1)
    with pytest.raises(ValueError):
        Bounds(0.0)


def test_heatmap_values():
    h = gaussian_heatmap([(2, 3)], HeatmapParams(2.0, 1.5), (5, 6))
    assert h[2, 3] == 2.0
    assert math.isclose(h[2, 4], 2.0 * math.exp(-1 / (2 * 1.5 ** 2)), rel_tol=1e-15)
    # u is the row index
    assert h[3, 3] == h[2, 4]


def test_heatmap_max_combine():
    p = HeatmapParams(1.0, 2.0)
    both = gaussian_heatmap([(1, 1), (1, 2)], p, (4, 4))
    a = gaussian_heatmap([(1, 1)], p, (4, 4))
    b = gaussian_heatmap([(1, 2)], p, (4, 4))
    assert np.array_equal(both, np.maximum(a, b))
    assert not gaussian_heatmap([], p, (3, 3)).any()
    with pytest.raises(ValueError):
        gaussian_heatmap([(5, 0)], p, (3, 3))


def test_heatmap_series_and_threshold():
    s = heatmap_series([(1, 2, 2)], HeatmapParams(1.0, 1.0), (3, 5, 5))
    assert not s[0].any() and s[1, 2, 2] == 1.0
    m = threshold_map(s, 1.0)
    assert m.sum() == 1
    assert threshold_map(s, 0.0).all()


def _single_roi(spec, grid=(5, 5)):
    mask = np.zeros((spec.patch_t, grid[0] * spec.patch_h, grid[1] * spec.patch_w), bool)
    mask[:, 2 * spec.patch_h, 2 * spec.patch_w] = True
    return mask


def test_single_interior_roi():
    spec = PartitionSpec(2, 4, 4)
    mask = _single_roi(spec)
    eight = classify_patches(mask, spec, Bounds(0.1), roi_fraction=0.01)
    assert eight.counts() == {"ROI": 1, "BUFFER": 8, "NON_ROI": 16}
    assert eight.classes[0, 2, 2] == PatchClass.ROI
    assert classify_patches(mask, spec, Bounds(0.1), roi_fraction=0.01, connectivity=4).counts()["BUFFER"] == 4
    assert classify_patches(mask, spec, Bounds(0.1), roi_fraction=0.01, depth=2).counts()["BUFFER"] == 24
    assert classify_patches(mask, spec, Bounds(0.1), roi_fraction=0.01, depth=0).counts()["BUFFER"] == 0


def test_roi_fraction_threshold_is_inclusive():
    spec = PartitionSpec(1, 2, 2)
    mask = np.zeros((1, 2, 2), bool)
    mask[0, 0, 0] = True
    assert classify_patches(mask, spec, Bounds(1), roi_fraction=0.25).counts()["ROI"] == 1
    assert classify_patches(mask, spec, Bounds(1), roi_fraction=0.26).counts()["ROI"] == 0


def test_buffer_stays_within_time_block_unless_temporal():
    spec = PartitionSpec(1, 2, 2)
    mask = np.zeros((3, 6, 6), bool)
    mask[1, 2, 2] = True
    plain = classify_patches(mask, spec, Bounds(1))
    assert plain.counts()["BUFFER"] == 8
    temporal = classify_patches(mask, spec, Bounds(1), temporal=True)
    assert temporal.classes[0, 1, 1] == PatchClass.BUFFER
    assert temporal.counts()["BUFFER"] == 10


def test_collapse_and_ratio():
    cmap = PatchClassMap(np.array([[[0, 1, 2]]], np.uint8), Bounds(0.1, 0.1, 0.5))
    assert list(cmap.collapsed().flat) == [0, 0, 2]
    assert list(cmap.taus()) == [0.1, 0.1, 0.5]
    assert roi_ratio(cmap) == 1 / 3
    assert roi_ratio(np.array([[[True, False]]])) == 0.5


def test_mask_and_points_files(tmp_path):
    m = np.random.default_rng(0).random((2, 3, 5)) < 0.5
    write_mask(m, tmp_path / "m.bits")
    assert np.array_equal(read_mask(tmp_path / "m.bits"), m)
    pts = [(0, 1.5, 2.25), (3, 0.0, 7.0)]
    write_points(pts, tmp_path / "p.csv")
    assert read_points(tmp_path / "p.csv") == pts
