"""Domain types and grid geometry shared by the encoder, decoder and evaluator."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np


class PPDMError(Exception):
    """Base class for library errors."""


class CollisionError(PPDMError):
    """Two distinct ground-truth points land on the same output cell."""


class MatchError(PPDMError):
    """No candidate with positive confidence is available for matching."""


class Point2(NamedTuple):
    x: float
    y: float


@dataclass(frozen=True)
class Box:
    """Half-open pixel rectangle ``[x1, x2) x [y1, y2)`` in input-image coordinates.

    Zero-area boxes are representable because the decoder emits them for
    non-positive size regressions; ``validate()`` enforces the strict
    ground-truth invariant.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box coordinates {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def center(self) -> Point2:
        return Point2((self.x1 + self.x2) / 2, (self.y1 + self.y2) / 2)

    @property
    def degenerate(self) -> bool:
        return self.x2 <= self.x1 or self.y2 <= self.y1

    def validate(self) -> None:
        if self.degenerate:
            raise ValueError(f"box has non-positive size {self.as_list()}")

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class Triplet:
    human: Box
    object: Box
    verb: int
    object_cat: int
    score: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.verb < 0 or self.object_cat < 0:
            raise ValueError("negative category id")


@dataclass(frozen=True)
class GridConfig:
    """Input frame, output stride and category counts.

    ``num_objects`` is the number of object categories and ``num_verbs`` the
    number of interaction classes; they set the channel counts of the object
    and interaction heatmaps.
    """

    input_w: int = 512
    input_h: int = 512
    stride: int = 4
    num_objects: int = 80
    num_verbs: int = 117

    def __post_init__(self):
        if min(self.input_w, self.input_h, self.stride) <= 0:
            raise ValueError("grid dimensions must be positive")
        if self.input_w % self.stride or self.input_h % self.stride:
            raise ValueError(f"stride {self.stride} does not divide {self.input_w}x{self.input_h}")
        if self.num_objects <= 0 or self.num_verbs <= 0:
            raise ValueError("category counts must be positive")

    @property
    def out_w(self) -> int:
        return self.input_w // self.stride

    @property
    def out_h(self) -> int:
        return self.input_h // self.stride

    def check_triplet(self, t: Triplet) -> None:
        if t.verb >= self.num_verbs:
            raise ValueError(f"verb {t.verb} >= {self.num_verbs}")
        if t.object_cat >= self.num_objects:
            raise ValueError(f"object category {t.object_cat} >= {self.num_objects}")
        for box in (t.human, t.object):
            box.validate()
            if box.x1 < 0 or box.y1 < 0 or box.x2 > self.input_w or box.y2 > self.input_h:
                raise ValueError(f"box {box.as_list()} outside {self.input_w}x{self.input_h} frame")


def to_low_res(p: Point2, cfg: GridConfig) -> Point2:
    """Quantize an input-pixel point to its output cell ``(floor(x/d), floor(y/d))``."""
    if not (0 <= p.x < cfg.input_w and 0 <= p.y < cfg.input_h):
        raise ValueError(f"point {tuple(p)} outside {cfg.input_w}x{cfg.input_h} frame")
    return Point2(math.floor(p.x / cfg.stride), math.floor(p.y / cfg.stride))


def interaction_point(h: Point2, o: Point2) -> Point2:
    # floor((h + o) / 2), summed in this order
    return Point2((h.x + o.x) // 2, (h.y + o.y) // 2)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.width * a.height + b.width * b.height - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` arrays of ``x1, y1, x2, y2``."""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return out


@dataclass
class Annotations:
    """Ground truth for a set of images; ``images`` preserves file order."""

    grid: GridConfig
    images: dict[int, list[Triplet]]
