import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import triplet
from ppdm.core import Box, GridConfig, MatchError, Point2
from ppdm.decoder import DecodeConfig, Peak, decode, match, nms_maxpool, reconstruct_box, suppressed_topk, topk
from ppdm.fixtures import brute_force_decode, perfect_maps
from ppdm.targets import MapSet


def test_nms_examples():
    row = np.array([[[0.2, 0.9, 0.4]]])
    assert nms_maxpool(row).tolist() == [[[0.0, 0.9, 0.0]]]
    const = np.full((2, 4, 5), 0.3)
    assert np.array_equal(nms_maxpool(const), const)
    peak = np.zeros((1, 5, 5))
    peak[0, 2, 2], peak[0, 1, 1], peak[0, 0, 4] = 0.8, 0.5, 0.1
    out = nms_maxpool(peak)
    assert out[0, 2, 2] == 0.8 and out[0, 1, 1] == 0.0 and out[0, 0, 4] == 0.1


def test_nms_channels_independent():
    heat = np.zeros((2, 3, 3))
    heat[0, 1, 1], heat[1, 1, 2] = 0.5, 0.9
    assert np.array_equal(nms_maxpool(heat), heat)


def _padded_nms(heat):
    p = np.pad(heat, ((0, 0), (1, 1), (1, 1)), mode="edge")
    h, w = heat.shape[1:]
    win = np.max([p[:, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)], axis=0)
    return np.where(win == heat, heat, 0.0)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(1, 7), st.integers(1, 7)),
              elements=st.sampled_from([0.0, 0.1, 0.5, 0.5, 0.9, 1.0])))
def test_nms_matches_padded_window(heat):
    assert np.array_equal(nms_maxpool(heat), _padded_nms(heat))


def test_topk_examples():
    heat = np.zeros((2, 4, 4))
    assert [p.confidence for p in topk(heat, 5)] == [0.0] * 5
    assert topk(heat, 5, score_floor=0.1) == []
    heat[1, 2, 3] = 0.7
    assert topk(heat, 100)[0] == Peak(1, Point2(3, 2), 0.7)
    assert len(topk(heat, 100)) == 32


def test_topk_tie_order():
    heat = np.zeros((2, 3, 3))
    heat[1, 0, 0] = heat[0, 2, 1] = heat[0, 0, 2] = 0.5
    assert [(p.channel, p.cell.y, p.cell.x) for p in topk(heat, 3)] == [(0, 0, 2), (0, 2, 1), (1, 0, 0)]


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9), st.integers(1, 9)),
              elements=st.one_of(st.sampled_from([0.0, 0.0, 0.0, 0.3, 0.3, 1.0]), st.floats(0, 1))),
       st.integers(1, 60))
def test_suppressed_topk_equals_topk_of_nms(heat, k):
    flat = nms_maxpool(heat).ravel()
    k = min(k, flat.size)
    expected = np.lexsort((np.arange(flat.size), -flat))[:k]
    idx, vals = suppressed_topk(heat, k)
    assert idx.tolist() == expected.tolist()
    assert vals.tolist() == flat[expected].tolist()


def test_match_examples():
    anchor = Peak(0, Point2(15, 12), 0.8)
    a, b = Peak(0, Point2(10, 10), 0.5), Peak(0, Point2(11, 10), 0.9)
    assert match(anchor, (5, 2), [a, b]) == a
    a, b = Peak(0, Point2(10, 11), 0.1), Peak(0, Point2(12, 10), 0.9)
    assert match(anchor, (5, 2), [a, b]) == b
    far = Peak(3, Point2(0, 0), 0.2)
    assert match(anchor, (5, 2), [far]) == far


def test_match_ties_prefer_confidence_then_position():
    anchor = Peak(0, Point2(5, 5), 1.0)
    left, right = Peak(0, Point2(4, 5), 0.5), Peak(0, Point2(6, 5), 0.5)
    assert match(anchor, (0, 0), [right, left]) == left
    low_ch = Peak(0, Point2(6, 5), 0.5)
    assert match(anchor, (0, 0), [Peak(1, Point2(4, 5), 0.5), low_ch]) == low_ch  # channel before position
    strong = Peak(2, Point2(7, 5), 1.0)
    assert match(anchor, (0, 0), [Peak(0, Point2(6, 5), 0.5), strong]) == strong  # cost 2 vs 2, confidence wins
    x, y = Peak(0, Point2(5, 5), 0.25), Peak(1, Point2(3, 5), 0.5)  # both cost 0 vs 4: not a tie
    assert match(anchor, (0, 0), [y, x]) == x


def test_match_excludes_zero_confidence():
    anchor = Peak(0, Point2(5, 5), 1.0)
    with pytest.raises(MatchError):
        match(anchor, (0, 0), [Peak(0, Point2(5, 5), 0.0)])
    with pytest.raises(MatchError):
        match(anchor, (0, 0), [])


def test_reconstruct_box():
    wh = np.zeros((2, 4, 4))
    off = np.zeros((2, 4, 4))
    wh[:, 2, 2] = (2.5, 5.0)
    off[:, 2, 2] = (0.5, 0.5)
    assert reconstruct_box(Peak(0, Point2(2, 2), 1.0), wh, off, 4) == Box(5, 0, 15, 20)
    box = reconstruct_box(Peak(0, Point2(1, 3), 1.0), wh, off, 4)
    assert box == Box(4, 12, 4, 12) and box.degenerate
    wh[:, 0, 0] = (-1.0, 2.0)
    assert reconstruct_box(Peak(0, Point2(0, 0), 1.0), wh, off, 4).width == 0.0


def test_decode_round_trip(grid):
    ts = [triplet(verb=1, cat=2), triplet(h=(20, 100, 12, 12), o=(100, 100, 12, 30), verb=4, cat=0)]
    out = decode(perfect_maps(ts, grid), grid, DecodeConfig(k_sel=10))
    top = {(t.human, t.object, t.verb, t.object_cat, t.score) for t in out[:2]}
    assert top == {(t.human, t.object, t.verb, t.object_cat, 1.0) for t in ts}
    assert [t.score for t in out] == sorted((t.score for t in out), reverse=True)


def test_decode_empty_cases(grid):
    maps = MapSet.zeros(grid)
    assert decode(maps, grid, DecodeConfig(score_floor=0.1)) == []
    assert decode(maps, grid) == []  # no positive human or object candidates
    maps.heat_h[0, 1, 1] = maps.heat_o[0, 2, 2] = 0.5
    out = decode(maps, grid, DecodeConfig(k_sel=7))
    assert len(out) == 7 and all(t.score == 0.0 for t in out)


def test_decode_matches_brute_force(grid):
    rng = np.random.default_rng(11)
    for _ in range(5):
        maps = MapSet.zeros(grid)
        for name, arr in maps.items():
            if name.startswith("heat"):
                arr[...] = np.round(rng.uniform(0, 1, arr.shape) ** 6, 2)
            else:
                arr[...] = rng.integers(-6, 7, arr.shape)
        assert decode(maps, grid, DecodeConfig(k_sel=30)) == brute_force_decode(maps, grid, k_sel=30)


def test_decode_scale_invariant_ranking(grid):
    ts = [triplet(verb=1, cat=2), triplet(h=(20, 100, 12, 12), o=(100, 100, 12, 30), verb=4, cat=0)]
    maps = perfect_maps(ts, grid)
    maps.heat_a *= 0.5
    a = decode(perfect_maps(ts, grid), grid, DecodeConfig(k_sel=10))
    b = decode(maps, grid, DecodeConfig(k_sel=10))
    assert [(t.human, t.object, t.verb) for t in a] == [(t.human, t.object, t.verb) for t in b]


def test_decode_rejects_wrong_shapes():
    grid = GridConfig(32, 32, 4, 2, 2)
    with pytest.raises(ValueError):
        decode(MapSet.zeros(GridConfig(64, 64, 4, 2, 2)), grid)
