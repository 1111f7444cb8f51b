"""Ground-truth encoding of HOI triplets into point heatmaps and regression maps."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .core import Box, CollisionError, GridConfig, Point2, Triplet, interaction_point, to_low_res

MAP_NAMES = ("heat_h", "heat_o", "heat_a", "wh_h", "wh_o", "off_h", "off_o", "disp_ah", "disp_ao")
HEAT_NAMES = ("heat_h", "heat_o", "heat_a")

MIN_OVERLAP = 0.7


@dataclass
class MapSet:
    """The nine dense ``C x H x W`` head maps, ground-truth or predicted."""

    heat_h: np.ndarray
    heat_o: np.ndarray
    heat_a: np.ndarray
    wh_h: np.ndarray
    wh_o: np.ndarray
    off_h: np.ndarray
    off_o: np.ndarray
    disp_ah: np.ndarray
    disp_ao: np.ndarray

    @classmethod
    def zeros(cls, cfg: GridConfig, dtype=np.float64) -> "MapSet":
        shape = (cfg.out_h, cfg.out_w)
        chans = map_channels(cfg)
        return cls(**{name: np.zeros((chans[name],) + shape, dtype=dtype) for name in MAP_NAMES})

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]

    def copy(self) -> "MapSet":
        return MapSet(**{k: v.copy() for k, v in self.items()})

    def check(self, cfg: GridConfig) -> None:
        chans = map_channels(cfg)
        for name, arr in self.items():
            want = (chans[name], cfg.out_h, cfg.out_w)
            if arr.shape != want:
                raise ValueError(f"{name} has shape {arr.shape}, expected {want}")


def map_channels(cfg: GridConfig) -> dict[str, int]:
    chans = dict.fromkeys(MAP_NAMES, 2)
    chans.update(heat_h=1, heat_o=cfg.num_objects, heat_a=cfg.num_verbs)
    return chans


@dataclass
class EncodedTargets:
    maps: MapSet
    mask_h: np.ndarray  # (H, W) bool, human point cells
    mask_o: np.ndarray  # object point cells, any category
    mask_a: np.ndarray  # interaction point cells, any verb
    num_h: int  # M
    num_o: int  # D
    num_a: int  # N


def gaussian_radius(w_cells: float, h_cells: float, min_overlap: float = MIN_OVERLAP) -> int:
    """Largest integer corner shift keeping IoU >= ``min_overlap`` with the original box.

    Three perturbations are considered: a diagonal translation, a symmetric
    shrink and a symmetric growth. Each yields a quadratic in the shift ``r``
    whose relevant root bounds the tolerated shift; the result is the floor of
    the smallest bound.
    """
    if w_cells <= 0 or h_cells <= 0:
        raise ValueError(f"box size must be positive, got {w_cells} x {h_cells}")
    if not 0 < min_overlap < 1:
        raise ValueError(f"min_overlap must lie in (0, 1), got {min_overlap}")
    w, h, m = float(w_cells), float(h_cells), float(min_overlap)
    s = w + h
    # translation: (w-r)(h-r) / (2wh - (w-r)(h-r)) >= m
    c1 = w * h * (1 - m) / (1 + m)
    r1 = (s - math.sqrt(max(s * s - 4 * c1, 0.0))) / 2
    # shrink: (w-2r)(h-2r) / wh >= m
    r2 = (2 * s - math.sqrt(max(4 * s * s - 16 * (1 - m) * w * h, 0.0))) / 8
    # growth: wh / ((w+2r)(h+2r)) >= m
    r3 = (-2 * m * s + math.sqrt(4 * m * m * s * s + 16 * m * (1 - m) * w * h)) / (8 * m)
    return max(0, math.floor(min(r1, r2, r3)))


def splat(heat: np.ndarray, channel: int, center: Point2, radius: int) -> np.ndarray:
    """Max-combine a Gaussian of ``sigma = (2r+1)/6`` into ``heat[channel]`` in place."""
    if not 0 <= channel < heat.shape[0]:
        raise IndexError(f"channel {channel} out of range for {heat.shape[0]} channels")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    _, hgt, wid = heat.shape
    cx, cy = int(center.x), int(center.y)
    if not (0 <= cx < wid and 0 <= cy < hgt):
        raise ValueError(f"center {tuple(center)} outside {wid}x{hgt} grid")
    sigma = (2 * radius + 1) / 6
    x0, x1 = max(cx - radius, 0), min(cx + radius, wid - 1)
    y0, y1 = max(cy - radius, 0), min(cy + radius, hgt - 1)
    dx = np.arange(x0, x1 + 1) - cx
    dy = np.arange(y0, y1 + 1) - cy
    g = np.exp(-(dx[None, :] ** 2 + dy[:, None] ** 2) / (2 * sigma * sigma))
    window = heat[channel, y0 : y1 + 1, x0 : x1 + 1]
    np.maximum(window, g, out=window)
    return heat


def _box_radius(box: Box, cfg: GridConfig) -> int:
    return gaussian_radius(box.width / cfg.stride, box.height / cfg.stride)


@dataclass(frozen=True)
class _Point:
    cell: Point2
    box: Box
    channel: int
    radius: int


@dataclass(frozen=True)
class _Interaction:
    cell: Point2
    verb: int
    human: _Point
    object: _Point


def plan_points(triplets, cfg: GridConfig):
    """Resolve distinct human/object points and interaction points for a scene.

    Raises CollisionError when two distinct points would write the same cell of
    a shared map. Objects of different categories share the size/offset maps,
    so any two distinct objects on one cell collide; interactions with
    different verbs may share a cell only when their displacements agree.
    """
    humans: dict[Box, _Point] = {}
    objects: dict[tuple[Box, int], _Point] = {}
    h_cells: dict[Point2, Box] = {}
    o_cells: dict[Point2, tuple[Box, int]] = {}
    inters: list[_Interaction] = []
    a_cells: dict[Point2, tuple[Point2, Point2, set]] = {}
    for t in triplets:
        cfg.check_triplet(t)
        hp = humans.get(t.human)
        if hp is None:
            cell = to_low_res(t.human.center, cfg)
            if cell in h_cells:
                raise CollisionError(f"humans {h_cells[cell].as_list()} and {t.human.as_list()} share cell {tuple(cell)}")
            h_cells[cell] = t.human
            hp = humans[t.human] = _Point(cell, t.human, 0, _box_radius(t.human, cfg))
        okey = (t.object, t.object_cat)
        op = objects.get(okey)
        if op is None:
            cell = to_low_res(t.object.center, cfg)
            if cell in o_cells:
                raise CollisionError(f"objects {o_cells[cell][0].as_list()} and {t.object.as_list()} share cell {tuple(cell)}")
            o_cells[cell] = okey
            op = objects[okey] = _Point(cell, t.object, t.object_cat, _box_radius(t.object, cfg))
        acell = interaction_point(hp.cell, op.cell)
        seen = a_cells.get(acell)
        if seen is None:
            a_cells[acell] = (hp.cell, op.cell, {t.verb})
        else:
            if t.verb in seen[2]:
                raise CollisionError(f"two verb-{t.verb} interactions share cell {tuple(acell)}")
            if (seen[0], seen[1]) != (hp.cell, op.cell):
                raise CollisionError(f"interactions at cell {tuple(acell)} disagree on displacement")
            seen[2].add(t.verb)
        inters.append(_Interaction(acell, t.verb, hp, op))
    return list(humans.values()), list(objects.values()), inters


def encode(triplets, cfg: GridConfig) -> EncodedTargets:
    humans, objects, inters = plan_points(triplets, cfg)
    maps = MapSet.zeros(cfg)
    d = cfg.stride
    mask_h = np.zeros((cfg.out_h, cfg.out_w), dtype=bool)
    mask_o = np.zeros_like(mask_h)
    mask_a = np.zeros_like(mask_h)

    for points, heat, wh, off, mask in (
        (humans, maps.heat_h, maps.wh_h, maps.off_h, mask_h),
        (objects, maps.heat_o, maps.wh_o, maps.off_o, mask_o),
    ):
        for p in points:
            splat(heat, p.channel, p.cell, p.radius)
            cx, cy = p.cell
            c = p.box.center
            wh[:, cy, cx] = (p.box.width / d, p.box.height / d)
            off[:, cy, cx] = (c.x / d - cx, c.y / d - cy)
            mask[cy, cx] = True

    for it in inters:
        splat(maps.heat_a, it.verb, it.cell, min(it.human.radius, it.object.radius))
        ax, ay = it.cell
        maps.disp_ah[:, ay, ax] = (ax - it.human.cell.x, ay - it.human.cell.y)
        maps.disp_ao[:, ay, ax] = (ax - it.object.cell.x, ay - it.object.cell.y)
        mask_a[ay, ax] = True

    return EncodedTargets(maps, mask_h, mask_o, mask_a, len(humans), len(objects), len(inters))


def targets_from_maps(maps: MapSet) -> EncodedTargets:
    """Rebuild masks and point counts from ground-truth maps alone.

    Point cells are exactly the heatmap entries equal to 1, which is how
    ``encode`` marks them, so a target directory of nine tensor files is
    self-describing.
    """
    pos_h, pos_o, pos_a = (getattr(maps, n) == 1.0 for n in HEAT_NAMES)
    return EncodedTargets(
        maps,
        pos_h.any(axis=0),
        pos_o.any(axis=0),
        pos_a.any(axis=0),
        int(pos_h.sum()),
        int(pos_o.sum()),
        int(pos_a.sum()),
    )
