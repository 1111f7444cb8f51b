"""HOI detection mean average precision.

A detection is a true positive when its verb and object category equal those
of a not-yet-matched ground-truth triplet in the same image and both its
human and object boxes overlap that triplet's boxes with IoU at or above the
threshold. Detections are matched greedily in descending score order.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import Annotations, Triplet, iou_matrix


class APMode(str, Enum):
    PER_HOI = "per_hoi"
    PER_VERB = "per_verb"


class Setting(str, Enum):
    DEFAULT = "default"
    KNOWN_OBJECT = "known_object"


@dataclass(frozen=True)
class EvalConfig:
    iou_thresh: float = 0.5
    ap_mode: APMode = APMode.PER_HOI
    setting: Setting = Setting.DEFAULT
    max_dets_per_image: int | None = None
    rare_threshold: int = 10

    def __post_init__(self):
        if not 0 < self.iou_thresh < 1:
            raise ValueError(f"iou_thresh must lie in (0, 1), got {self.iou_thresh}")
        object.__setattr__(self, "ap_mode", APMode(self.ap_mode))
        object.__setattr__(self, "setting", Setting(self.setting))


@dataclass
class EvalReport:
    per_class_ap: dict
    mean_ap: float
    n_gt: dict
    n_det: dict
    subset_means: dict = field(default_factory=dict)  # None when a subset has no classes
    curves: dict = field(default_factory=dict)  # class -> (recall, precision)
    config: EvalConfig | None = None


def class_key(t: Triplet, mode: APMode):
    return t.verb if mode == APMode.PER_VERB else (t.verb, t.object_cat)


def format_class(key) -> str:
    return f"{key[0]}:{key[1]}" if isinstance(key, tuple) else str(key)


def _boxes(triplets, which: str) -> np.ndarray:
    return np.array([getattr(t, which).as_list() for t in triplets], dtype=np.float64).reshape(-1, 4)


def _score_order(dets) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: -dets[i].score)


def match_detections(gts: list[Triplet], dets: list[Triplet], cfg: EvalConfig = EvalConfig()) -> list[bool]:
    """TP/FP label for each detection of one image, aligned with ``dets``.

    Each detection, in score order, claims the unmatched eligible ground truth
    with the highest min(human IoU, object IoU); it is a TP if that overlap
    reaches the threshold.
    """
    labels = [False] * len(dets)
    if not dets or not gts:
        return labels
    overlap = np.minimum(iou_matrix(_boxes(dets, "human"), _boxes(gts, "human")),
                         iou_matrix(_boxes(dets, "object"), _boxes(gts, "object")))
    verbs = np.array([g.verb for g in gts])
    cats = np.array([g.object_cat for g in gts])
    free = np.ones(len(gts), dtype=bool)
    for i in _score_order(dets):
        d = dets[i]
        cand = np.where(free & (verbs == d.verb) & (cats == d.object_cat), overlap[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= cfg.iou_thresh:
            free[j] = False
            labels[i] = True
    return labels


def average_precision(labels, n_gt: int) -> float:
    """Area under the precision envelope of a ranked TP/FP list; NaN when ``n_gt == 0``."""
    ap, _, _ = _ap_curve(labels, n_gt)
    return ap


def _ap_curve(labels, n_gt: int):
    if n_gt == 0:
        return math.nan, np.zeros(0), np.zeros(0)
    tp_flags = np.asarray(labels, dtype=bool)
    tp = np.cumsum(tp_flags)
    fp = np.cumsum(~tp_flags)
    rec = tp / n_gt
    prec = tp / np.maximum(tp + fp, 1)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
    return ap, rec, prec


def evaluate(gt_set: Annotations, det_set: dict[int, list[Triplet]], cfg: EvalConfig = EvalConfig()) -> EvalReport:
    grid = gt_set.grid
    unknown = set(det_set) - set(gt_set.images)
    if unknown:
        raise KeyError(f"predictions reference unknown image ids {sorted(unknown)}")

    n_gt: dict = defaultdict(int)
    ranked: dict = defaultdict(list)  # class -> [(sort key, tp)]
    for img_rank, (img_id, gts) in enumerate(gt_set.images.items()):
        for g in gts:
            n_gt[class_key(g, cfg.ap_mode)] += 1
        dets = det_set.get(img_id, [])
        for d in dets:
            if d.verb >= grid.num_verbs or d.object_cat >= grid.num_objects:
                raise ValueError(f"image {img_id}: class ({d.verb}, {d.object_cat}) out of range")
        dets = [dets[i] for i in _score_order(dets)]
        if cfg.max_dets_per_image is not None:
            dets = dets[: cfg.max_dets_per_image]
        if cfg.setting == Setting.KNOWN_OBJECT:
            present = {g.object_cat for g in gts}
            dets = [d for d in dets if d.object_cat in present]
        for rank, (d, tp) in enumerate(zip(dets, match_detections(gts, dets, cfg))):
            ranked[class_key(d, cfg.ap_mode)].append(((-d.score, img_rank, rank), tp))

    per_class, curves = {}, {}
    for key in sorted(n_gt):
        entries = sorted(ranked.get(key, []), key=lambda e: e[0])
        ap, rec, prec = _ap_curve([tp for _, tp in entries], n_gt[key])
        per_class[key] = ap
        curves[key] = (rec, prec)
    n_det = {key: len(v) for key, v in sorted(ranked.items())}

    rare = [ap for k, ap in per_class.items() if n_gt[k] < cfg.rare_threshold]
    common = [ap for k, ap in per_class.items() if n_gt[k] >= cfg.rare_threshold]
    return EvalReport(
        per_class_ap=per_class,
        mean_ap=_mean(per_class.values()),
        n_gt=dict(n_gt),
        n_det=n_det,
        subset_means={"rare": _mean(rare) if rare else None, "non_rare": _mean(common) if common else None},
        curves=curves,
        config=cfg,
    )


def _mean(values) -> float:
    values = list(values)
    return float(sum(values) / len(values)) if values else 0.0


def report_to_dict(report: EvalReport) -> dict:
    cfg = report.config or EvalConfig()
    return {
        "ap_mode": cfg.ap_mode.value,
        "setting": cfg.setting.value,
        "iou_thresh": cfg.iou_thresh,
        "mean_ap": report.mean_ap,
        "subset_means": dict(report.subset_means),
        "classes": [
            {"class": format_class(k), "ap": ap, "n_gt": report.n_gt[k], "n_det": report.n_det.get(k, 0)}
            for k, ap in report.per_class_ap.items()
        ],
    }


def format_report(report: EvalReport) -> str:
    cfg = report.config or EvalConfig()
    lines = [
        f"mode={cfg.ap_mode.value} setting={cfg.setting.value} iou>={cfg.iou_thresh}",
        f"{'class':>10} {'n_gt':>6} {'n_det':>6} {'AP':>8}",
    ]
    for k, ap in report.per_class_ap.items():
        lines.append(f"{format_class(k):>10} {report.n_gt[k]:>6} {report.n_det.get(k, 0):>6} {ap:>8.4f}")
    lines.append(f"mAP {report.mean_ap:.6f}")
    for name, value in report.subset_means.items():
        lines.append(f"mAP[{name}] " + ("n/a" if value is None else f"{value:.6f}"))
    return "\n".join(lines)
