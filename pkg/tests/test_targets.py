import math

import numpy as np
import pytest

from conftest import box_at, triplet
from ppdm.core import Box, CollisionError, GridConfig, Point2, Triplet
from ppdm.targets import MAP_NAMES, MapSet, encode, gaussian_radius, map_channels, splat, targets_from_maps


def _box_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _scan_radius(w, h, m):
    """Largest integer r for which every corner perturbation keeps IoU >= m."""
    r = 0
    while True:
        n = r + 1
        trans = _box_iou((0, 0, w, h), (n, n, w + n, h + n))
        shrink = (w - 2 * n) * (h - 2 * n) / (w * h) if w > 2 * n and h > 2 * n else 0.0
        grow = w * h / ((w + 2 * n) * (h + 2 * n))
        if min(trans, shrink, grow) < m:
            return r
        r = n


def test_radius_examples():
    assert gaussian_radius(10, 10, 0.7) == 0
    assert gaussian_radius(40, 40, 0.7) == 3
    assert gaussian_radius(1e-6, 1e-6) == 0
    assert gaussian_radius(50, 50, 1 - 1e-9) == 0


@pytest.mark.parametrize("w, h", [(w, h) for w in (1, 3, 7, 10, 16, 25, 40, 64, 100, 127) for h in (2, 10, 33, 90)])
def test_radius_matches_integer_scan(w, h):
    assert gaussian_radius(w, h, 0.7) == _scan_radius(w, h, 0.7)


def test_radius_monotone_in_size():
    rs = [gaussian_radius(s, s) for s in range(1, 200)]
    assert rs == sorted(rs)


@pytest.mark.parametrize("args", [(0, 5), (5, -1), (5, 5, 0.0), (5, 5, 1.0)])
def test_radius_rejects(args):
    with pytest.raises(ValueError):
        gaussian_radius(*args)


def test_splat_values():
    heat = np.zeros((2, 9, 9))
    splat(heat, 1, Point2(4, 4), 0)
    assert heat[1, 4, 4] == 1.0 and heat.sum() == 1.0
    heat = np.zeros((1, 9, 9))
    splat(heat, 0, Point2(4, 4), 3)
    assert heat[0, 4, 4] == 1.0
    assert heat[0, 4, 5] == pytest.approx(math.exp(-1 / (2 * (7 / 6) ** 2)))
    assert heat[0, 4, 5] == pytest.approx(0.6926, abs=1e-4)
    assert heat[0, 4, 8] == 0.0  # outside the window


def test_splat_max_combines_and_clips():
    heat = np.zeros((1, 5, 5))
    splat(heat, 0, Point2(0, 0), 2)
    before = heat.copy()
    splat(heat, 0, Point2(4, 4), 2)
    assert np.all(heat >= before) and heat[0, 0, 0] == 1.0 and heat[0, 4, 4] == 1.0


def test_splat_errors():
    heat = np.zeros((2, 5, 5))
    with pytest.raises(IndexError):
        splat(heat, 2, Point2(1, 1), 1)
    with pytest.raises(ValueError):
        splat(heat, 0, Point2(1, 1), -1)
    with pytest.raises(ValueError):
        splat(heat, 0, Point2(5, 1), 1)


def test_encode_offsets_and_displacements():
    cfg = GridConfig(128, 128, 4, 5, 6)
    # human center (42, 42) px -> cell (10, 10); object center (82, 62) px -> cell (20, 15)
    t = Triplet(box_at(42, 42, 20, 20), box_at(82, 62, 20, 20), 3, 2)
    enc = encode([t], cfg)
    m = enc.maps
    assert m.heat_h[0, 10, 10] == 1.0 and m.heat_o[2, 15, 20] == 1.0 and m.heat_a[3, 12, 15] == 1.0
    assert tuple(m.off_h[:, 10, 10]) == (0.5, 0.5)
    assert tuple(m.wh_h[:, 10, 10]) == (5.0, 5.0)
    assert tuple(m.disp_ah[:, 12, 15]) == (5, 2)
    assert tuple(m.disp_ao[:, 12, 15]) == (-5, -3)
    assert (enc.num_h, enc.num_o, enc.num_a) == (1, 1, 1)


def test_encode_offset_small_example():
    cfg = GridConfig(64, 64, 4, 1, 1)
    t = Triplet(box_at(10, 10, 8, 8), box_at(40, 40, 8, 8), 0, 0)
    m = encode([t], cfg).maps
    assert tuple(m.off_h[:, 2, 2]) == (0.5, 0.5)


def test_encode_empty(grid):
    enc = encode([], grid)
    assert all(not a.any() for _, a in enc.maps.items())
    assert (enc.num_h, enc.num_o, enc.num_a) == (0, 0, 0)
    assert {n: a.shape[0] for n, a in enc.maps.items()} == map_channels(grid)


def test_encode_shares_points(grid):
    a = triplet(verb=0)
    b = Triplet(a.human, a.object, 1, a.object_cat)
    enc = encode([a, b], grid)
    assert (enc.num_h, enc.num_o, enc.num_a) == (1, 1, 2)
    assert enc.mask_a.sum() == 1


def test_encode_collisions(grid):
    h2 = box_at(41, 41, 10, 10)  # same cell as the default human, different box
    with pytest.raises(CollisionError):
        encode([triplet(), Triplet(h2, box_at(100, 100, 10, 10), 0, 1)], grid)
    o2 = Triplet(box_at(10, 10, 8, 8), box_at(81, 61, 10, 10), 0, 1)  # object cell shared, other category
    with pytest.raises(CollisionError):
        encode([triplet(), o2], grid)


def test_encode_rejects_invalid_triplet(grid):
    with pytest.raises(ValueError):
        encode([triplet(verb=99)], grid)


def test_encode_deterministic_and_order_free(grid):
    ts = [triplet(), triplet(h=(20, 100, 12, 12), o=(100, 100, 12, 30), verb=2, cat=4)]
    a, b = encode(ts, grid), encode(ts[::-1], grid)
    for (n, x), (_, y) in zip(a.maps.items(), b.maps.items()):
        assert np.array_equal(x, y), n


def test_targets_from_maps_recovers_masks(grid):
    ts = [triplet(), triplet(h=(20, 100, 12, 12), o=(100, 100, 12, 30), verb=2, cat=4)]
    enc = encode(ts, grid)
    back = targets_from_maps(enc.maps)
    for attr in ("mask_h", "mask_o", "mask_a"):
        assert np.array_equal(getattr(enc, attr), getattr(back, attr))
    assert (back.num_h, back.num_o, back.num_a) == (enc.num_h, enc.num_o, enc.num_a)


def test_mapset_check(grid):
    ms = MapSet.zeros(grid)
    ms.check(grid)
    assert tuple(n for n, _ in ms.items()) == MAP_NAMES
    ms.heat_a = np.zeros((1, grid.out_h, grid.out_w))
    with pytest.raises(ValueError):
        ms.check(grid)
