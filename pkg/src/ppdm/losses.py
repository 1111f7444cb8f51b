"""Training losses over post-sigmoid head maps, with analytic gradients w.r.t. the predictions."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .targets import EncodedTargets, MapSet

DEFAULT_LAMBDA = 0.1


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 2.0
    beta: float = 4.0
    eps: float = 1e-12

    def __post_init__(self):
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("alpha and beta must be positive")
        if not 0 < self.eps < 1e-3:
            raise ValueError("eps must lie in (0, 1e-3)")


@dataclass(frozen=True)
class LossBreakdown:
    L_a: float
    L_h: float
    L_o: float
    L_wh: float
    L_off: float
    L_ah: float
    L_ao: float
    total: float
    lam: float = DEFAULT_LAMBDA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lam")
        return d


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def focal_loss(pred, gt, n_points, params: FocalParams = FocalParams()):
    """Penalty-reduced focal loss over a probability heatmap.

    Cells where ``gt == 1`` are positives; every other cell is a negative
    down-weighted by ``(1 - gt) ** beta``. Returns ``(loss, dloss/dpred)``.
    Predictions are clamped to ``[eps, 1 - eps]``; the gradient is zero
    where the clamp is active.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    if n_points < 1:
        raise ValueError(f"point count must be >= 1, got {n_points}")
    a, b, eps = params.alpha, params.beta, params.eps
    p = np.clip(pred, eps, 1 - eps)
    pos = gt == 1.0
    neg_w = (1 - gt) ** b
    log_p, log_q = np.log(p), np.log1p(-p)

    pos_term = (1 - p) ** a * log_p
    neg_term = neg_w * p**a * log_q
    loss = -np.sum(np.where(pos, pos_term, neg_term)) / n_points

    d_pos = -a * (1 - p) ** (a - 1) * log_p + (1 - p) ** a / p
    d_neg = neg_w * (a * p ** (a - 1) * log_q - p**a / (1 - p))
    grad = -np.where(pos, d_pos, d_neg) / n_points
    grad[(pred < eps) | (pred > 1 - eps)] = 0.0
    return float(loss), grad


def masked_l1_loss(pred, gt, mask, normalizer: float):
    """L1 over the cells selected by a ``(H, W)`` mask, summed over channels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check_shapes(pred, gt)
    if normalizer <= 0:
        raise ValueError(f"normalizer must be positive, got {normalizer}")
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), pred.shape)
    diff = np.where(mask, pred - gt, 0.0)
    return float(np.abs(diff).sum() / normalizer), np.sign(diff) / normalizer


def displacement_loss(pred_disp, gt_disp, interaction_mask, n_interactions: int):
    return masked_l1_loss(pred_disp, gt_disp, interaction_mask, n_interactions)


def total_loss(preds: MapSet, targets: EncodedTargets, lam: float = DEFAULT_LAMBDA,
               params: FocalParams = FocalParams()):
    """Weighted sum of all head losses; returns ``(LossBreakdown, MapSet of gradients)``.

    Heatmap losses normalize by their own positive counts (at least 1); size
    and offset losses by the number of human plus object points; displacement
    losses by the number of interactions.
    """
    gt = targets.maps
    n_h, n_o, n_a = (max(n, 1) for n in (targets.num_h, targets.num_o, targets.num_a))
    n_box = max(targets.num_h + targets.num_o, 1)

    L_a, g_heat_a = focal_loss(preds.heat_a, gt.heat_a, n_a, params)
    L_h, g_heat_h = focal_loss(preds.heat_h, gt.heat_h, n_h, params)
    L_o, g_heat_o = focal_loss(preds.heat_o, gt.heat_o, n_o, params)
    wh_h, g_wh_h = masked_l1_loss(preds.wh_h, gt.wh_h, targets.mask_h, n_box)
    wh_o, g_wh_o = masked_l1_loss(preds.wh_o, gt.wh_o, targets.mask_o, n_box)
    off_h, g_off_h = masked_l1_loss(preds.off_h, gt.off_h, targets.mask_h, n_box)
    off_o, g_off_o = masked_l1_loss(preds.off_o, gt.off_o, targets.mask_o, n_box)
    L_ah, g_ah = displacement_loss(preds.disp_ah, gt.disp_ah, targets.mask_a, n_a)
    L_ao, g_ao = displacement_loss(preds.disp_ao, gt.disp_ao, targets.mask_a, n_a)

    L_wh, L_off = wh_h + wh_o, off_h + off_o
    total = L_a + L_h + L_o + lam * (L_ah + L_ao + L_wh) + L_off
    grads = MapSet(
        heat_h=g_heat_h,
        heat_o=g_heat_o,
        heat_a=g_heat_a,
        wh_h=lam * g_wh_h,
        wh_o=lam * g_wh_o,
        off_h=g_off_h,
        off_o=g_off_o,
        disp_ah=lam * g_ah,
        disp_ao=lam * g_ao,
    )
    return LossBreakdown(L_a, L_h, L_o, L_wh, L_off, L_ah, L_ao, total, lam), grads
