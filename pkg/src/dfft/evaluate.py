"""COCO-style average precision."""
from __future__ import annotations

import numpy as np
import torch

from .head import Detections, pairwise_iou

IOU_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


def _match_class(dets: list[tuple[int, float, torch.Tensor]], gts: dict[int, torch.Tensor],
                 thresh: float) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching across images by descending score. Returns (scores, is_tp)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i][1])
    used = {img: np.zeros(len(b), dtype=bool) for img, b in gts.items()}
    scores = np.empty(len(order))
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        img, score, box = dets[i]
        scores[rank] = score
        g = gts.get(img)
        if g is None or len(g) == 0:
            continue
        ious = pairwise_iou(box[None].double(), g.double())[0].numpy()
        ious[used[img]] = -1.0
        best = int(ious.argmax())
        if ious[best] >= thresh:
            used[img][best] = True
            tp[rank] = True
    return scores, tp


def average_precision(tp: np.ndarray, num_gt: int) -> float:
    """101-point interpolated AP from a score-sorted TP/FP sequence."""
    if num_gt == 0:
        return float("nan")
    if len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / num_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    # monotone envelope from the right
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def evaluate_detections(detections: list[Detections], gt_boxes: list[torch.Tensor],
                        gt_labels: list[torch.Tensor], num_classes: int) -> dict:
    """AP@[.5:.95], AP50, AP75 and per-class AP (classes without ground truth are skipped)."""
    per_class = {}
    table = np.full((num_classes, len(IOU_THRESHOLDS)), np.nan)
    for c in range(num_classes):
        gts = {i: b[l == c] for i, (b, l) in enumerate(zip(gt_boxes, gt_labels))}
        num_gt = sum(len(v) for v in gts.values())
        if num_gt == 0:
            continue
        dets = [
            (i, d.score, torch.tensor(d.box.as_list(), dtype=torch.float64))
            for i, ds in enumerate(detections)
            for d in ds
            if d.label == c
        ]
        for t, thr in enumerate(IOU_THRESHOLDS):
            _, tp = _match_class(dets, gts, float(thr))
            table[c, t] = average_precision(tp, num_gt)
        per_class[c] = float(np.mean(table[c]))
    valid = ~np.isnan(table[:, 0])
    if not valid.any():
        return {"AP": 0.0, "AP50": 0.0, "AP75": 0.0, "per_class": per_class}
    return {
        "AP": float(np.mean(table[valid])),
        "AP50": float(np.mean(table[valid, 0])),
        "AP75": float(np.mean(table[valid, 5])),
        "per_class": per_class,
    }
