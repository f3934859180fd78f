"""Dice and KL consistency losses, segmentation metrics, particle diversity."""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import Tensor

DICE_SMOOTH = 1e-5
KL_FLOOR = 1e-8


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def dice_loss_per_sample(p, q, stop_grad_q: bool = False, smooth: float = DICE_SMOOTH) -> Tensor:
    """Soft Dice loss for each sample of a [B,C,H,W] pair, shape [B].

    For each class, ``1 - (2 sum(p*q) + s) / (sum(p) + sum(q) + s)``; the
    per-sample value is the mean over classes.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ad.ShapeError(f"dice_loss: prediction shapes {p.shape} and {q.shape} differ")
    if p.ndim != 4:
        raise ad.ShapeError(f"dice_loss_per_sample expects [B,C,H,W], got {p.shape}")
    if stop_grad_q:
        q = ad.detach(q)
    C = p.shape[1]
    inter = ad.sum(p * q, axis=(2, 3))
    denom = ad.sum(p, axis=(2, 3)) + ad.sum(q, axis=(2, 3))
    ratio = (inter * 2.0 + smooth) / (denom + smooth)
    per_class = 1.0 - ratio
    return ad.sum(per_class, axis=1) * (1.0 / C)


def dice_loss(p, q, stop_grad_q: bool = False, smooth: float = DICE_SMOOTH) -> Tensor:
    """Scalar soft Dice loss between two predictions.

    Accepts single predictions [C,H,W] or batches [B,C,H,W]; a batch is
    reduced by averaging the per-sample losses.
    """
    p, q = _as_tensor(p), _as_tensor(q)
    if p.shape != q.shape:
        raise ad.ShapeError(f"dice_loss: prediction shapes {p.shape} and {q.shape} differ")
    if p.ndim == 3:
        p = ad.reshape(p, (1,) + p.shape)
        q = ad.reshape(q, (1,) + q.shape)
    return ad.mean(dice_loss_per_sample(p, q, stop_grad_q, smooth))


def kl_pixelwise(p, q) -> Tensor:
    """Mean over pixels of ``sum_c q_c (log q_c - log p_c)``; ``q`` is a constant.

    Both distributions are floored at 1e-8 before the logarithm. Batches are
    averaged over samples as well as pixels.
    """
    p = _as_tensor(p)
    qd = q.data if isinstance(q, Tensor) else np.asarray(q, dtype=ad.get_dtype())
    if p.shape != qd.shape:
        raise ad.ShapeError(f"kl_pixelwise: prediction shapes {p.shape} and {qd.shape} differ")
    caxis = p.ndim - 3
    qc = np.maximum(qd, KL_FLOOR)
    neg_entropy = Tensor((qd * np.log(qc)).astype(np.float64).sum(axis=caxis, keepdims=False))
    logp = ad.log(ad.maximum(p, KL_FLOOR))
    cross = ad.sum(Tensor(qd) * logp, axis=caxis)
    return ad.mean(neg_entropy - cross)


def kl_per_sample(p: Tensor, q: np.ndarray) -> Tensor:
    """Per-sample pixel-mean KL for a [B,C,H,W] batch, shape [B]."""
    qd = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=ad.get_dtype())
    if p.shape != qd.shape or p.ndim != 4:
        raise ad.ShapeError(f"kl_per_sample: shapes {p.shape} and {qd.shape}")
    hw = p.shape[2] * p.shape[3]
    neg_entropy = Tensor((qd * np.log(np.maximum(qd, KL_FLOOR))).astype(np.float64).sum(axis=(1, 2, 3)))
    cross = ad.sum(Tensor(qd) * ad.log(ad.maximum(p, KL_FLOOR)), axis=(1, 2, 3))
    return (neg_entropy - cross) * (1.0 / hw)


# ---------------------------------------------------------------- metrics


@dataclass(frozen=True)
class MetricReport:
    dice_pct: float
    jaccard_pct: float
    hd95_px: float
    asd_px: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of a boolean mask with at least one in-image 4-neighbour outside it."""
    m = mask.astype(bool)
    edge = np.zeros_like(m)
    edge[1:, :] |= m[1:, :] != m[:-1, :]
    edge[:-1, :] |= m[:-1, :] != m[1:, :]
    edge[:, 1:] |= m[:, 1:] != m[:, :-1]
    edge[:, :-1] |= m[:, :-1] != m[:, 1:]
    return edge & m


def _directed(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each ``src`` pixel to its nearest ``dst`` pixel."""
    dist = ndimage.distance_transform_edt(~dst)
    return dist[src]


def nearest_rank(values: np.ndarray, q: float) -> float:
    v = np.sort(values)
    rank = int(np.ceil(q / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def surface_distances(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(95HD, ASD) between two boolean masks, in pixels."""
    bp, bg = boundary(pred), boundary(gt)
    has_p, has_g = bp.any(), bg.any()
    if not has_p and not has_g:
        return 0.0, 0.0
    if has_p != has_g:
        diag = float(np.hypot(*pred.shape))
        return diag, diag
    d_pg = _directed(bp, bg)
    d_gp = _directed(bg, bp)
    hd95 = max(nearest_rank(d_pg, 95), nearest_rank(d_gp, 95))
    pooled = np.concatenate([d_pg, d_gp])
    asd = math.fsum(pooled.tolist()) / pooled.size
    return hd95, asd


def overlap(pred: np.ndarray, gt: np.ndarray) -> tuple[float, float]:
    """(Dice, Jaccard) of two boolean masks as fractions; both empty counts as perfect."""
    inter = int(np.count_nonzero(pred & gt))
    sp, sg = int(np.count_nonzero(pred)), int(np.count_nonzero(gt))
    if sp + sg == 0:
        return 1.0, 1.0
    union = sp + sg - inter
    return 2.0 * inter / (sp + sg), inter / union


def _fmean(values) -> float:
    # correctly rounded, so the result does not depend on summation order
    return math.fsum(values) / len(values)


def seg_metrics(pred_mask, gt_mask, num_classes: int) -> MetricReport:
    """Dice/Jaccard (percent) and 95HD/ASD (pixels), averaged over foreground classes."""
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise ValueError(f"masks must be equal-shape 2-d arrays, got {pred.shape} and {gt.shape}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    for name, m in (("pred_mask", pred), ("gt_mask", gt)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise ValueError(f"{name} has labels outside [0, {num_classes})")
    dice, jac, hd, asd = [], [], [], []
    for c in range(1, num_classes):
        p, g = pred == c, gt == c
        d, j = overlap(p, g)
        h, a = surface_distances(p, g)
        dice.append(d)
        jac.append(j)
        hd.append(h)
        asd.append(a)
    return MetricReport(
        dice_pct=100.0 * _fmean(dice),
        jaccard_pct=100.0 * _fmean(jac),
        hd95_px=_fmean(hd),
        asd_px=_fmean(asd),
    )


def average_reports(reports: list[MetricReport]) -> MetricReport:
    if not reports:
        raise ValueError("no reports to average")
    return MetricReport(
        dice_pct=_fmean([r.dice_pct for r in reports]),
        jaccard_pct=_fmean([r.jaccard_pct for r in reports]),
        hd95_px=_fmean([r.hd95_px for r in reports]),
        asd_px=_fmean([r.asd_px for r in reports]),
    )


# ---------------------------------------------------------------- diversity


def mean_pairwise_sse(particles) -> float:
    """Mean over unordered particle pairs of the summed squared difference."""
    arrs = [np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64) for p in particles]
    if len(arrs) < 2:
        raise ValueError(f"need at least 2 particles, got {len(arrs)}")
    shape = arrs[0].shape
    if any(a.shape != shape for a in arrs):
        raise ValueError(f"particle shapes differ: {[a.shape for a in arrs]}")
    total = 0.0
    pairs = 0
    for a, b in itertools.combinations(arrs, 2):
        total += float(np.sum((a - b) ** 2))
        pairs += 1
    return total / pairs
