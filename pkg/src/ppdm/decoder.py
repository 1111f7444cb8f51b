"""Inference-time decoding: peak extraction, interaction-anchored matching and box reconstruction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Box, GridConfig, MatchError, Point2, Triplet
from .targets import MapSet


@dataclass(frozen=True)
class Peak:
    channel: int
    cell: Point2
    confidence: float


@dataclass(frozen=True)
class DecodeConfig:
    k_sel: int = 100
    score_floor: float = 0.0

    def __post_init__(self):
        if self.k_sel < 1:
            raise ValueError("k_sel must be >= 1")


def nms_maxpool(heat: np.ndarray) -> np.ndarray:
    """Keep cells equal to their 3x3 neighbourhood max (edge-replicated borders), zero the rest."""
    heat = np.asarray(heat)
    # replicated border cells never exceed the cell itself, so out-of-range neighbours are skipped
    rows = heat.copy()
    np.maximum(rows[:, :, 1:], heat[:, :, :-1], out=rows[:, :, 1:])
    np.maximum(rows[:, :, :-1], heat[:, :, 1:], out=rows[:, :, :-1])
    hmax = rows.copy()
    np.maximum(hmax[:, 1:], rows[:, :-1], out=hmax[:, 1:])
    np.maximum(hmax[:, :-1], rows[:, 1:], out=hmax[:, :-1])
    return np.multiply(heat, hmax == heat, out=hmax)


def _topk_indices(flat: np.ndarray, k: int) -> np.ndarray:
    """Flat indices of the k largest entries, ordered by value desc then index asc."""
    n = flat.size
    if n <= k:
        idx = np.arange(n)
    else:
        positive = np.flatnonzero(flat > 0)
        if positive.size >= k:
            kth = np.partition(flat[positive], positive.size - k)[positive.size - k]
            above = positive[flat[positive] > kth]
            tied = positive[flat[positive] == kth]
        else:
            kth = 0.0 if flat.min() >= 0 else np.partition(flat, n - k)[n - k]
            above = np.flatnonzero(flat > kth)
            tied = np.flatnonzero(flat == kth)
        idx = np.concatenate([above, tied[: k - above.size]])
    return idx[np.lexsort((idx, -flat[idx]))]


def _neighbour_offsets(idx: np.ndarray, shape):
    """Flat indices of the clamped 3x3 neighbourhood of each flat index, shape (9, n)."""
    _, h, w = shape
    ch, rem = np.divmod(idx, h * w)
    y, x = np.divmod(rem, w)
    out = np.empty((9, idx.size), dtype=np.int64)
    i = 0
    for dy in (-1, 0, 1):
        ny = np.clip(y + dy, 0, h - 1)
        for dx in (-1, 0, 1):
            out[i] = (ch * h + ny) * w + np.clip(x + dx, 0, w - 1)
            i += 1
    return out


def _local_max(flat: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    return (flat[_neighbour_offsets(idx, shape)] <= flat[idx]).all(axis=0)


def _order(flat: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    return idx[np.lexsort((idx, -flat[idx]))][:k]


def suppressed_topk(heat: np.ndarray, k: int):
    """``(flat indices, values)`` of the top-k of ``nms_maxpool(heat)``, computed without suppressing every cell.

    Local-max status is only evaluated for the strongest raw cells. Every cell
    outside a candidate set ``{value > t}`` has suppressed value ``<= t``, so
    once ``k`` candidates survive the answer is fixed. For non-negative sparse
    maps the remainder is filled in index order from the cells left at zero.
    """
    flat = heat.reshape(-1)
    n = flat.size
    if n > 8 * k:
        positive = np.flatnonzero(flat > 0)
        if positive.size <= n // 8:
            surv = positive[_local_max(flat, positive, heat.shape)]
            if surv.size >= k:
                idx = _order(flat, surv, k)
                return idx, flat[idx]
            if not (flat < 0).any():
                # every other cell is 0 after suppression; ties go by index
                need = k - surv.size
                head = np.arange(min(n, need + surv.size))
                zeros = head[~np.isin(head, surv, assume_unique=True)][:need]
                idx = _order(flat, surv, k)
                return np.concatenate([idx, zeros]), np.concatenate([flat[idx], np.zeros(zeros.size, flat.dtype)])
        else:
            m = 8 * k
            while m < n:
                t = np.partition(flat, n - m)[n - m]
                cand = np.flatnonzero(flat > t)
                surv = cand[_local_max(flat, cand, heat.shape)]
                if surv.size >= k:
                    idx = _order(flat, surv, k)
                    return idx, flat[idx]
                if t <= 0:
                    break
                m *= 8
    sup = nms_maxpool(heat).reshape(-1)
    idx = _topk_indices(sup, k)
    return idx, sup[idx]


def _topk_arrays(heat: np.ndarray, k_sel: int, score_floor: float = 0.0, suppress: bool = False):
    c, h, w = heat.shape
    flat = heat.reshape(-1)
    if suppress:
        idx, conf = suppressed_topk(heat, k_sel)
    else:
        idx = _topk_indices(flat, k_sel)
        conf = flat[idx]
    conf = conf.astype(np.float64)
    keep = conf >= score_floor
    idx, conf = idx[keep], conf[keep]
    ch, rem = np.divmod(idx, h * w)
    ys, xs = np.divmod(rem, w)
    return ch, ys, xs, conf


def topk(heat_suppressed: np.ndarray, k_sel: int, score_floor: float = 0.0) -> list[Peak]:
    """The k_sel strongest (channel, cell) entries across all channels.

    Ties are broken by (channel, y, x) ascending. Entries below
    ``score_floor`` are dropped after selection.
    """
    if k_sel < 1:
        raise ValueError("k_sel must be >= 1")
    ch, ys, xs, conf = _topk_arrays(heat_suppressed, k_sel, score_floor)
    return [Peak(int(c), Point2(int(x), int(y)), float(s)) for c, x, y, s in zip(ch, xs, ys, conf)]


def _match_all(ax, ay, dx, dy, cx, cy, cc, conf) -> np.ndarray:
    """For each anchor, the candidate minimizing L1(coarse point, candidate) / confidence.

    ``ax - dx`` is the coarse point implied by the anchor and its displacement.
    Ties go to higher confidence, then (channel, y, x) ascending.
    """
    cost = (np.abs((ax - dx)[:, None] - cx[None, :]) + np.abs((ay - dy)[:, None] - cy[None, :])) / conf[None, :]
    # candidate preference among equal costs
    pref = np.empty(conf.size, dtype=np.int64)
    pref[np.lexsort((cx, cy, cc, -conf))] = np.arange(conf.size)
    tied = cost == cost.min(axis=1, keepdims=True)
    return np.argmin(np.where(tied, pref[None, :], conf.size), axis=1)


def match(anchor: Peak, disp, candidates: list[Peak]) -> Peak:
    pool = [c for c in candidates if c.confidence > 0]
    if not pool:
        raise MatchError(f"no positive-confidence candidate for anchor at {tuple(anchor.cell)}")
    arr = np.array([(c.cell.x, c.cell.y, c.channel, c.confidence) for c in pool], dtype=np.float64)
    one = np.ones(1)
    i = _match_all(one * anchor.cell.x, one * anchor.cell.y, one * float(disp[0]), one * float(disp[1]),
                   arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])[0]
    return pool[int(i)]


def reconstruct_box(peak: Peak, wh_map: np.ndarray, off_map: np.ndarray, stride: int) -> Box:
    """Box in input pixels from the size and offset regressed at the peak cell.

    Negative sizes are clamped to zero, giving a degenerate box.
    """
    return _read_box(wh_map, off_map, int(peak.cell.x), int(peak.cell.y), stride)


def _box(x: int, y: int, w: float, h: float, ox: float, oy: float, d: int) -> Box:
    w, h = max(w, 0.0), max(h, 0.0)
    cx, cy = x + ox, y + oy
    return Box((cx - w / 2) * d, (cy - h / 2) * d, (cx + w / 2) * d, (cy + h / 2) * d)


def decode(maps: MapSet, cfg: GridConfig, dcfg: DecodeConfig = DecodeConfig()) -> list[Triplet]:
    """Turn predicted head maps into scored triplets, best first.

    Each of the top interaction peaks is paired with one human and one object
    peak drawn from the global top-k pools; the score is the product of the
    three peak confidences.
    """
    maps.check(cfg)
    k = dcfg.k_sel
    hc, hy, hx, hconf = _topk_arrays(maps.heat_h, k, suppress=True)
    oc, oy, ox, oconf = _topk_arrays(maps.heat_o, k, suppress=True)
    ac, ay, ax, aconf = _topk_arrays(maps.heat_a, k, dcfg.score_floor, suppress=True)

    hkeep, okeep = hconf > 0, oconf > 0
    if not hkeep.any() or not okeep.any():
        return []
    hc, hy, hx, hconf = hc[hkeep], hy[hkeep].astype(np.float64), hx[hkeep].astype(np.float64), hconf[hkeep]
    oc, oy, ox, oconf = oc[okeep], oy[okeep].astype(np.float64), ox[okeep].astype(np.float64), oconf[okeep]

    disp_ah = maps.disp_ah[:, ay, ax].astype(np.float64)
    disp_ao = maps.disp_ao[:, ay, ax].astype(np.float64)
    fx, fy = ax.astype(np.float64), ay.astype(np.float64)
    h_idx = _match_all(fx, fy, disp_ah[0], disp_ah[1], hx, hy, hc, hconf)
    o_idx = _match_all(fx, fy, disp_ao[0], disp_ao[1], ox, oy, oc, oconf)
    d = cfg.stride
    out = []
    for i, hi, oi in zip(range(ac.size), h_idx, o_idx):
        human = _read_box(maps.wh_h, maps.off_h, int(hx[hi]), int(hy[hi]), d)
        obj = _read_box(maps.wh_o, maps.off_o, int(ox[oi]), int(oy[oi]), d)
        score = float(aconf[i]) * float(hconf[hi]) * float(oconf[oi])
        out.append(Triplet(human, obj, int(ac[i]), int(oc[oi]), min(score, 1.0)))
    # stable: equal scores keep interaction-peak order
    out.sort(key=lambda t: -t.score)
    return out


def _read_box(wh_map, off_map, x: int, y: int, d: int) -> Box:
    return _box(x, y, float(wh_map[0, y, x]), float(wh_map[1, y, x]),
                float(off_map[0, y, x]), float(off_map[1, y, x]), d)
