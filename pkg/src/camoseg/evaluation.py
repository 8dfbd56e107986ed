"""Mask IoU and COCO-style average precision (101-point interpolation)."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, UndefinedAPError

IOU_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2).tolist())
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
MAX_DETS = 100


@dataclass
class ScoredInstance:
    mask: np.ndarray
    score: float
    category_id: int = 0


@dataclass
class GTInstance:
    mask: np.ndarray
    category_id: int = 0
    iscrowd: bool = False


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    per_threshold: dict[float, float]
    per_category: dict[int, float] | None = None

    def to_json(self) -> str:
        payload = {
            "ap": self.ap, "ap50": self.ap50, "ap75": self.ap75,
            "per_threshold": {f"{t:.2f}": v for t, v in self.per_threshold.items()},
            "per_category": None if self.per_category is None else {str(k): v for k, v in self.per_category.items()},
        }
        return json.dumps(payload, sort_keys=True)

    def table_row(self, name: str = "Ours") -> str:
        return f"| {name} | {100 * self.ap:.1f} | {100 * self.ap50:.1f} | {100 * self.ap75:.1f} |"


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def iou_matrix(dts: list[np.ndarray], gts: list[np.ndarray], crowd: list[bool]) -> np.ndarray:
    """Pairwise IoU; against crowd regions the denominator is the detection area."""
    if not dts or not gts:
        return np.zeros((len(dts), len(gts)))
    d = np.stack([m.ravel() for m in dts]).astype(np.float64)
    g = np.stack([m.ravel() for m in gts]).astype(np.float64)
    inter = d @ g.T
    da, ga = d.sum(1)[:, None], g.sum(1)[None, :]
    union = np.where(np.asarray(crowd)[None, :], da, da + ga - inter)
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _match_image(dts, gts, thresholds):
    """Greedy COCO matching for one image and category group.

    Returns (scores, per-threshold tp flags, per-threshold ignore flags, #non-crowd gt).
    """
    gt_order = sorted(range(len(gts)), key=lambda k: gts[k].iscrowd)  # non-crowd first
    gts = [gts[k] for k in gt_order]
    dts = sorted(dts, key=lambda d: -d.score)[:MAX_DETS]
    crowd = [g.iscrowd for g in gts]
    ious = iou_matrix([d.mask for d in dts], [g.mask for g in gts], crowd)
    tp = np.zeros((len(thresholds), len(dts)), dtype=bool)
    ignore = np.zeros((len(thresholds), len(dts)), dtype=bool)
    for t_i, t in enumerate(thresholds):
        taken = np.zeros(len(gts), dtype=bool)
        for d_i in range(len(dts)):
            best = min(t, 1 - 1e-10)
            m = -1
            for g_i in range(len(gts)):
                if taken[g_i] and not crowd[g_i]:
                    continue
                if m > -1 and not crowd[m] and crowd[g_i]:
                    break
                if ious[d_i, g_i] < best:
                    continue
                best = ious[d_i, g_i]
                m = g_i
            if m == -1:
                continue
            taken[m] = True
            if crowd[m]:
                ignore[t_i, d_i] = True
            else:
                tp[t_i, d_i] = True
    return np.array([d.score for d in dts]), tp, ignore, sum(not c for c in crowd)


def _interpolated_ap(scores, tp, ignore, num_gt) -> np.ndarray:
    """AP per threshold from pooled detections: 101-point interpolated precision."""
    order = np.argsort(-scores, kind="mergesort")
    out = np.zeros(tp.shape[0])
    for t_i in range(tp.shape[0]):
        keep = ~ignore[t_i, order]
        hits = tp[t_i, order][keep]
        tps = np.cumsum(hits)
        fps = np.cumsum(~hits)
        if len(hits) == 0:
            continue
        recall = tps / num_gt
        precision = tps / np.maximum(tps + fps, np.finfo(np.float64).eps)
        precision = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
        out[t_i] = q.mean()
    return out


def _pooled_ap(predictions, gts, thresholds, category=None):
    scores, tps, igns, num_gt = [], [], [], 0
    for img_id in sorted(set(gts) | set(predictions), key=str):
        dts = [d for d in predictions.get(img_id, []) if category is None or d.category_id == category]
        gt = [g for g in gts.get(img_id, []) if category is None or g.category_id == category]
        s, tp, ig, n = _match_image(dts, gt, thresholds)
        scores.append(s)
        tps.append(tp)
        igns.append(ig)
        num_gt += n
    if num_gt == 0:
        return None
    return _interpolated_ap(np.concatenate(scores), np.concatenate(tps, 1), np.concatenate(igns, 1), num_gt)


def average_precision(predictions: dict, gts: dict, thresholds=IOU_THRESHOLDS,
                      class_agnostic: bool = True) -> EvalResult:
    """COCO-style mask AP.

    ``predictions`` and ``gts`` map image ids to lists of :class:`ScoredInstance`
    and :class:`GTInstance`. In class-aware mode the AP of each category with
    ground truth is computed separately and the results averaged.
    """
    thresholds = tuple(float(t) for t in thresholds)
    if class_agnostic:
        per_t = _pooled_ap(predictions, gts, thresholds)
        if per_t is None:
            raise UndefinedAPError("AP is undefined: no non-crowd ground truth in the dataset")
        per_category = None
    else:
        cats = sorted({g.category_id for v in gts.values() for g in v if not g.iscrowd})
        if not cats:
            raise UndefinedAPError("AP is undefined: no non-crowd ground truth in the dataset")
        table = {c: _pooled_ap(predictions, gts, thresholds, c) for c in cats}
        per_t = np.mean(np.stack([table[c] for c in cats]), axis=0)
        per_category = {c: float(table[c].mean()) for c in cats}
    per_threshold = {t: float(v) for t, v in zip(thresholds, per_t)}
    return EvalResult(
        ap=float(np.mean(per_t)),
        ap50=per_threshold.get(0.5, float("nan")),
        ap75=per_threshold.get(0.75, float("nan")),
        per_threshold=per_threshold,
        per_category=per_category,
    )
