"""Seeded synthetic scenes and brute-force reference implementations.

The oracles here (``brute_force_decode``, ``reference_ap``,
``reference_loss``, ``finite_diff``) are deliberately plain loops that do not
call into the decoder, evaluator or loss modules they are used to check.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Annotations, Box, CollisionError, GridConfig, PPDMError, Triplet
from .evaluator import EvalConfig, EvalReport
from .targets import MAP_NAMES, MapSet, encode, plan_points

# Box corners are drawn on a 1/8 px lattice so every encoded value is exact in float32.
COORD_QUANTUM = 0.125


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    num_images: int = 10
    max_triplets_per_image: int = 8
    grid: GridConfig = field(default_factory=GridConfig)
    min_box_cells: int = 2
    max_retries: int = 1000

    def __post_init__(self):
        if not 0 <= self.max_triplets_per_image <= 8:
            raise ValueError("max_triplets_per_image must lie in [0, 8]")
        if self.min_box_cells < 2:
            raise ValueError("min_box_cells must be >= 2")
        if self.num_images < 0:
            raise ValueError("num_images must be >= 0")
        span = self.min_box_cells * self.grid.stride
        if span > min(self.grid.input_w, self.grid.input_h):
            raise ValueError("minimum box size exceeds the frame")


def image_rng(seed: int, index: int) -> np.random.Generator:
    """PCG64 stream for one image, keyed by (seed, image index) so streams are independent."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & (2**64 - 1), index])))


def _random_box(rng: np.random.Generator, grid: GridConfig, min_px: float) -> Box:
    q = COORD_QUANTUM
    coords = []
    for extent in (grid.input_w, grid.input_h):
        lo = int(rng.integers(0, int((extent - min_px) / q) + 1)) * q
        hi = int(rng.integers(int((lo + min_px) / q), int(extent / q) + 1)) * q
        coords.append((lo, hi))
    (x1, x2), (y1, y2) = coords
    return Box(x1, y1, x2, y2)


def _random_scene(rng: np.random.Generator, spec: SceneSpec) -> list[Triplet]:
    g = spec.grid
    n = int(rng.integers(1, spec.max_triplets_per_image + 1))
    min_px = spec.min_box_cells * g.stride
    n_humans = int(rng.integers(1, n + 1))
    n_objects = int(rng.integers(1, n + 1))
    humans = [_random_box(rng, g, min_px) for _ in range(n_humans)]
    objects = [(_random_box(rng, g, min_px), int(rng.integers(0, g.num_objects))) for _ in range(n_objects)]
    triplets = []
    for _ in range(n):
        h = humans[int(rng.integers(0, n_humans))]
        o, cat = objects[int(rng.integers(0, n_objects))]
        triplets.append(Triplet(h, o, int(rng.integers(0, g.num_verbs)), cat))
    return triplets


def generate_image(spec: SceneSpec, index: int) -> list[Triplet]:
    if spec.max_triplets_per_image == 0:
        return []
    rng = image_rng(spec.seed, index)
    for _ in range(spec.max_retries):
        triplets = _random_scene(rng, spec)
        try:
            plan_points(triplets, spec.grid)
        except CollisionError:
            continue
        return triplets
    raise PPDMError(f"image {index}: no collision-free scene after {spec.max_retries} attempts")


def generate(spec: SceneSpec) -> list[tuple[int, list[Triplet]]]:
    return [(i, generate_image(spec, i)) for i in range(spec.num_images)]


def to_annotations(scenes, grid: GridConfig) -> Annotations:
    return Annotations(grid, {i: list(ts) for i, ts in scenes})


def perfect_maps(triplets, cfg: GridConfig, peaks_only: bool = False) -> MapSet:
    """Predictions that reproduce the encoded targets.

    With ``peaks_only`` the heatmaps are 1 at point cells and 0 elsewhere,
    which is the focal loss minimizer; otherwise they equal the Gaussian
    targets.
    """
    maps = encode(triplets, cfg).maps.copy()
    if peaks_only:
        for name in ("heat_h", "heat_o", "heat_a"):
            heat = getattr(maps, name)
            heat[heat < 1.0] = 0.0
    return maps


# ---------------------------------------------------------------- decode oracle


def _brute_nms(heat):
    c, h, w = heat.shape
    out = np.zeros_like(heat)
    for k in range(c):
        for y in range(h):
            for x in range(w):
                best = heat[k, y, x]
                for yy in (y - 1, y, y + 1):
                    for xx in (x - 1, x, x + 1):
                        v = heat[k, min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
                        if v > best:
                            best = v
                if best == heat[k, y, x]:
                    out[k, y, x] = heat[k, y, x]
    return out


def _brute_topk(heat, k_sel):
    c, h, w = heat.shape
    entries = []
    for ch in range(c):
        for y in range(h):
            for x in range(w):
                entries.append((-float(heat[ch, y, x]), ch, y, x))
    entries.sort()
    return [(ch, y, x, -negv) for negv, ch, y, x in entries[:k_sel]]


def _brute_box(wh, off, y, x, d):
    w = max(float(wh[0, y, x]), 0.0)
    h = max(float(wh[1, y, x]), 0.0)
    cx = x + float(off[0, y, x])
    cy = y + float(off[1, y, x])
    return Box((cx - w / 2) * d, (cy - h / 2) * d, (cx + w / 2) * d, (cy + h / 2) * d)


def _brute_match(ax, ay, dx, dy, cands):
    best, best_key = None, None
    for ch, y, x, conf in cands:
        if conf <= 0:
            continue
        cost = (abs(ax - dx - x) + abs(ay - dy - y)) / conf
        key = (cost, -conf, ch, y, x)
        if best_key is None or key < best_key:
            best, best_key = (ch, y, x, conf), key
    return best


def brute_force_decode(maps: MapSet, cfg: GridConfig, k_sel: int = 100, score_floor: float = 0.0) -> list[Triplet]:
    d = cfg.stride
    humans = _brute_topk(_brute_nms(np.asarray(maps.heat_h, dtype=np.float64)), k_sel)
    objects = _brute_topk(_brute_nms(np.asarray(maps.heat_o, dtype=np.float64)), k_sel)
    anchors = _brute_topk(_brute_nms(np.asarray(maps.heat_a, dtype=np.float64)), k_sel)
    results = []
    for rank, (verb, ay, ax, aconf) in enumerate(anchors):
        if aconf < score_floor:
            continue
        hm = _brute_match(float(ax), float(ay), float(maps.disp_ah[0, ay, ax]), float(maps.disp_ah[1, ay, ax]), humans)
        om = _brute_match(float(ax), float(ay), float(maps.disp_ao[0, ay, ax]), float(maps.disp_ao[1, ay, ax]), objects)
        if hm is None or om is None:
            continue
        score = min(aconf * hm[3] * om[3], 1.0)
        t = Triplet(_brute_box(maps.wh_h, maps.off_h, hm[1], hm[2], d),
                    _brute_box(maps.wh_o, maps.off_o, om[1], om[2], d), verb, om[0], score)
        results.append((-score, rank, t))
    results.sort(key=lambda r: (r[0], r[1]))
    return [t for _, _, t in results]


# ---------------------------------------------------------------- AP oracle


def _plain_iou(a: Box, b: Box) -> float:
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union if union > 0 else 0.0


def reference_ap(gt_set: Annotations, det_set, cfg: EvalConfig = EvalConfig()) -> EvalReport:
    """Straight-line mAP with the same matching rules as the evaluator.

    AP is computed as the mean, over ground-truth instances, of the best
    precision reached at or beyond the rank where each recall level is first
    attained, which equals the area under the precision envelope.
    """
    per_verb = cfg.ap_mode.value == "per_verb"
    known_object = cfg.setting.value == "known_object"

    def key_of(t):
        return t.verb if per_verb else (t.verb, t.object_cat)

    n_gt = {}
    for gts in gt_set.images.values():
        for g in gts:
            n_gt[key_of(g)] = n_gt.get(key_of(g), 0) + 1

    pooled = {}
    for img_rank, (img_id, gts) in enumerate(gt_set.images.items()):
        dets = list(det_set.get(img_id, []))
        order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
        dets = [dets[i] for i in order]
        if cfg.max_dets_per_image is not None:
            dets = dets[: cfg.max_dets_per_image]
        if known_object:
            cats = set(g.object_cat for g in gts)
            dets = [dt for dt in dets if dt.object_cat in cats]
        used = [False] * len(gts)
        for rank, dt in enumerate(dets):
            best_j, best_ov = -1, -1.0
            for j, g in enumerate(gts):
                if used[j] or g.verb != dt.verb or g.object_cat != dt.object_cat:
                    continue
                ov = min(_plain_iou(dt.human, g.human), _plain_iou(dt.object, g.object))
                if ov > best_ov:
                    best_j, best_ov = j, ov
            tp = best_j >= 0 and best_ov >= cfg.iou_thresh
            if tp:
                used[best_j] = True
            pooled.setdefault(key_of(dt), []).append((-dt.score, img_rank, rank, tp))

    per_class = {}
    for key, total in n_gt.items():
        entries = sorted(pooled.get(key, []))
        precisions, hits = [], 0
        for i, e in enumerate(entries):
            hits += e[3]
            precisions.append(hits / (i + 1))
        ap, hits = 0.0, 0
        for i, e in enumerate(entries):
            if e[3]:
                hits += 1
                ap += max(precisions[i:]) / total
        per_class[key] = ap

    def mean(xs, empty=0.0):
        return sum(xs) / len(xs) if xs else empty

    n_det = {k: len(v) for k, v in pooled.items()}
    return EvalReport(
        per_class_ap=per_class,
        mean_ap=mean(list(per_class.values())),
        n_gt=n_gt,
        n_det=n_det,
        subset_means={
            "rare": mean([a for k, a in per_class.items() if n_gt[k] < cfg.rare_threshold], None),
            "non_rare": mean([a for k, a in per_class.items() if n_gt[k] >= cfg.rare_threshold], None),
        },
        config=cfg,
    )


# ---------------------------------------------------------------- loss oracle


def _ref_focal(pred, gt, n, alpha=2.0, beta=4.0, eps=1e-12):
    s = 0.0
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        p = min(max(p, eps), 1 - eps)
        if g == 1.0:
            s += (1 - p) ** alpha * math.log(p)
        else:
            s += (1 - g) ** beta * p**alpha * math.log(1 - p)
    return -s / n


def _ref_l1(pred, gt, mask, norm):
    s = 0.0
    for c in range(pred.shape[0]):
        for y in range(pred.shape[1]):
            for x in range(pred.shape[2]):
                if mask[y, x]:
                    s += abs(float(pred[c, y, x]) - float(gt[c, y, x]))
    return s / norm


def reference_loss(preds: MapSet, targets, lam: float = 0.1) -> dict:
    gt = targets.maps
    n_h, n_o, n_a = max(targets.num_h, 1), max(targets.num_o, 1), max(targets.num_a, 1)
    n_box = max(targets.num_h + targets.num_o, 1)
    out = {
        "L_a": _ref_focal(preds.heat_a, gt.heat_a, n_a),
        "L_h": _ref_focal(preds.heat_h, gt.heat_h, n_h),
        "L_o": _ref_focal(preds.heat_o, gt.heat_o, n_o),
        "L_wh": _ref_l1(preds.wh_h, gt.wh_h, targets.mask_h, n_box) + _ref_l1(preds.wh_o, gt.wh_o, targets.mask_o, n_box),
        "L_off": _ref_l1(preds.off_h, gt.off_h, targets.mask_h, n_box) + _ref_l1(preds.off_o, gt.off_o, targets.mask_o, n_box),
        "L_ah": _ref_l1(preds.disp_ah, gt.disp_ah, targets.mask_a, n_a),
        "L_ao": _ref_l1(preds.disp_ao, gt.disp_ao, targets.mask_a, n_a),
    }
    out["total"] = out["L_a"] + out["L_h"] + out["L_o"] + lam * (out["L_ah"] + out["L_ao"] + out["L_wh"]) + out["L_off"]
    return out


def finite_diff(loss_fn, maps, step: float, names=None):
    """Central-difference gradient of ``loss_fn(maps) -> float``.

    ``maps`` is an array or a dict of arrays; the result has the same
    structure. ``names`` restricts which dict entries are differentiated.
    """
    if isinstance(maps, np.ndarray):
        return finite_diff(lambda m: loss_fn(m["x"]), {"x": maps}, step)["x"]
    work = {k: np.array(v, dtype=np.float64) for k, v in maps.items()}
    grads = {}
    for name in names or list(work):
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn(work)
            flat[i] = orig - step
            down = loss_fn(work)
            flat[i] = orig
            gflat[i] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def mapset_from_dict(d) -> MapSet:
    return MapSet(**{n: d[n] for n in MAP_NAMES})
