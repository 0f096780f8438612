"""Inference post-processing and scale-binned average precision."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .ops import _sigmoid


@dataclass(frozen=True)
class Detection:
    box: tuple  # x1, y1, x2, y2 in pixels
    cls: int
    score: float
    level: int = 0

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate box {self.box}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def _iou_one_to_many(box: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    iw = np.minimum(box[2], boxes[:, 2]) - np.maximum(box[0], boxes[:, 0])
    ih = np.minimum(box[3], boxes[:, 3]) - np.maximum(box[1], boxes[:, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / ((box[2] - box[0]) * (box[3] - box[1]) + area - inter)


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy class-wise suppression; survivors come back in descending score."""
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    boxes = np.array([dets[i].box for i in order])
    classes = np.array([dets[i].cls for i in order])
    dead = np.zeros(len(order), dtype=bool)
    kept = []
    for j in range(len(order)):
        if dead[j]:
            continue
        kept.append(dets[order[j]])
        dead |= (classes == classes[j]) & (_iou_one_to_many(boxes[j], boxes) > iou_thresh)
    return kept


def decode_predictions(preds: Mapping[int, tuple], score_thresh: float = 0.05,
                       per_level_topk: int = 1000, nms_iou: float = 0.5, max_total: int = 100,
                       image_size: Optional[int] = None) -> list[Detection]:
    """Turn one image's dense outputs into detections.

    ``preds`` maps level -> (class logits K x h x w, side distances 4 x h x w).
    """
    if not 0.0 <= score_thresh <= 1.0 or not 0.0 < nms_iou <= 1.0:
        raise ValueError("thresholds out of range")
    cands: list[Detection] = []
    for lv in sorted(preds):
        logits, dist = preds[lv]
        logits, dist = np.asarray(logits), np.asarray(dist)
        k, h, w = logits.shape
        stride = 2 ** lv
        with np.errstate(over="ignore"):
            scores = _sigmoid(logits.reshape(-1))
        idx = np.flatnonzero(scores >= score_thresh)
        if idx.size > per_level_topk:
            top = np.argsort(-scores[idx], kind="stable")[:per_level_topk]
            idx = np.sort(idx[top])
        for flat in idx:
            c, rem = divmod(int(flat), h * w)
            y, x = divmod(rem, w)
            cx, cy = x * stride + stride / 2.0, y * stride + stride / 2.0
            l, t, r, b = dist[:, y, x]
            box = [cx - l, cy - t, cx + r, cy + b]
            if image_size is not None:
                box = [min(max(v, 0.0), float(image_size)) for v in box]
            if box[2] <= box[0] or box[3] <= box[1]:
                continue
            cands.append(Detection(tuple(float(v) for v in box), c, float(scores[flat]), lv))
    return nms(cands, nms_iou)[:max_total]


# ----------------------------------------------------------------------- AP

def _in_bin(side: float, bin_: Optional[tuple]) -> bool:
    return bin_ is None or bin_[0] < side <= bin_[1]


def _max_side(box) -> float:
    return max(box[2] - box[0], box[3] - box[1])


def match_class(dets_per_image, gts_per_image, cls: int, iou_thresh: float,
                bin_: Optional[tuple] = None):
    """Greedy matching for one class.

    Returns (flags in score order, number of counted GTs); flag 1 = TP,
    0 = FP. Detections matched to out-of-bin GTs, or unmatched detections
    whose own size falls outside the bin, are dropped.
    """
    pool = []
    for img, dets in enumerate(dets_per_image):
        for j, d in enumerate(dets):
            if d.cls == cls:
                pool.append((-d.score, img, j, d))
    pool.sort(key=lambda t: t[:3])
    gts = [[(box, _in_bin(_max_side(box), bin_)) for box, c in g if c == cls] for g in gts_per_image]
    npos = sum(ok for g in gts for _, ok in g)
    used = [[False] * len(g) for g in gts]
    flags = []
    for _, img, _, d in pool:
        best, best_iou = None, -1.0
        # counted GTs take precedence over ignored ones; equal IoUs go to the lower index
        for want in (True, False):
            for gi, (box, ok) in enumerate(gts[img]):
                if ok != want or used[img][gi]:
                    continue
                iou = box_iou(d.box, box)
                if iou >= iou_thresh and iou > best_iou:
                    best, best_iou = gi, iou
            if best is not None:
                break
        if best is not None:
            used[img][best] = True
            if gts[img][best][1]:
                flags.append(1)
        elif _in_bin(_max_side(d.box), bin_):
            flags.append(0)
    return flags, npos


def average_precision(flags: Sequence[int], npos: int) -> float:
    """101-point interpolated AP from TP/FP flags in descending score order."""
    if npos == 0 or not flags:
        return 0.0
    f = np.asarray(flags)
    tp = np.cumsum(f)
    fp = np.cumsum(1 - f)
    recall = tp / npos
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    points = np.arange(101) / 100
    idx = np.searchsorted(recall, points, side="left")
    vals = [float(envelope[i]) if i < len(envelope) else 0.0 for i in idx]
    return math.fsum(vals) / 101


def evaluate_ap(dets_per_image, gts_per_image, num_classes: int, iou_thresh=0.5,
                size_bins: Optional[Mapping[str, tuple]] = None) -> dict:
    """COCO-style AP at one or more IoU thresholds, overall and per size bin.

    Returns ``{"overall", <bin names>..., "per_class": {cls: ap}}``. Classes
    without any counted ground truth are left out of the class mean.
    """
    thresholds = [iou_thresh] if np.isscalar(iou_thresh) else list(iou_thresh)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise ValueError(f"IoU threshold {t} outside (0, 1)")
    bins = {"overall": None}
    bins.update(size_bins or {})
    out: dict = {}
    per_class = {}
    for name, bin_ in bins.items():
        class_aps = []
        for c in range(num_classes):
            aps = []
            for t in thresholds:
                flags, npos = match_class(dets_per_image, gts_per_image, c, t, bin_)
                if npos:
                    aps.append(average_precision(flags, npos))
            if aps:
                ap = math.fsum(aps) / len(aps)
                class_aps.append(ap)
                if name == "overall":
                    per_class[c] = ap
        out[name] = math.fsum(class_aps) / len(class_aps) if class_aps else 0.0
    out["per_class"] = per_class
    return out
