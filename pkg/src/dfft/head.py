"""Single-level anchor head: anchors, box coding, uniform matching, losses, NMS.

Boxes are ``(..., 4)`` tensors in corner form ``(x1, y1, x2, y2)``, image pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.ops import batched_nms

from .errors import CodingError, ConfigError, ShapeError
from .params import Scope, focal_prior
from .primitives import FeatureMap, linear

POSITIVE_MIN = 0
NEGATIVE = -1
IGNORE = -2

DEFAULT_SIZES = (32, 64, 128, 256, 512)
# exp() of larger log-ratios overflows early in training
MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass
class AnchorSet:
    boxes: torch.Tensor  # (feat_h * feat_w * K, 4)
    feat_h: int
    feat_w: int
    stride: int
    sizes: tuple[float, ...]

    @property
    def K(self) -> int:
        return len(self.sizes)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def centers(self) -> torch.Tensor:
        return (self.boxes[:, :2] + self.boxes[:, 2:]) / 2


@dataclass
class MatchAssignment:
    """Per-anchor labels: gt index (>= 0) for positives, NEGATIVE or IGNORE."""

    labels: torch.Tensor
    pre_filter: torch.Tensor  # labels before IoU-based ignore filtering

    @property
    def positive(self) -> torch.Tensor:
        return self.labels >= POSITIVE_MIN

    @property
    def negative(self) -> torch.Tensor:
        return self.labels == NEGATIVE

    @property
    def ignored(self) -> torch.Tensor:
        return self.labels == IGNORE

    def pairs(self) -> set[tuple[int, int]]:
        idx = torch.nonzero(self.labels >= 0).flatten()
        return {(int(a), int(self.labels[a])) for a in idx}


@dataclass
class Detection:
    box: Box
    label: int
    score: float


@dataclass
class Detections:
    items: list[Detection] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        boxes = torch.tensor([d.box.as_list() for d in self.items], dtype=torch.float64).reshape(-1, 4)
        labels = torch.tensor([d.label for d in self.items], dtype=torch.long)
        scores = torch.tensor([d.score for d in self.items], dtype=torch.float64)
        return boxes, labels, scores

    @classmethod
    def from_tensors(cls, boxes, labels, scores) -> "Detections":
        items = [
            Detection(Box(*map(float, b)), int(c), float(s))
            for b, c, s in zip(boxes.tolist(), labels.tolist(), scores.tolist())
        ]
        return cls(items)


# --------------------------------------------------------------------------
# geometry


def box_area(b: torch.Tensor) -> torch.Tensor:
    return (b[..., 2] - b[..., 0]).clamp_min(0) * (b[..., 3] - b[..., 1]).clamp_min(0)


def pairwise_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """IoU matrix of shape (len(a), len(b))."""
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = (rb - lt).clamp_min(0).prod(-1)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return torch.where(union > 0, inter / union.clamp_min(1e-12), torch.zeros_like(inter))


def giou(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> tuple[torch.Tensor, torch.Tensor]:
    """Elementwise (GIoU, IoU) of aligned box tensors."""
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    inter = (rb - lt).clamp_min(0).prod(-1)
    union = box_area(a) + box_area(b) - inter
    iou = inter / union.clamp_min(eps)
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    enclose = (rb_c - lt_c).clamp_min(0).prod(-1)
    return iou - (enclose - union) / enclose.clamp_min(eps), iou


def clip_boxes(boxes: torch.Tensor, height: float, width: float) -> torch.Tensor:
    x = boxes[..., 0::2].clamp(0, width)
    y = boxes[..., 1::2].clamp(0, height)
    return torch.stack([x[..., 0], y[..., 0], x[..., 1], y[..., 1]], dim=-1)


# --------------------------------------------------------------------------
# anchors and coding


def generate_anchors(feat_h: int, feat_w: int, stride: int = 32, sizes=DEFAULT_SIZES,
                     dtype: torch.dtype = torch.float32) -> AnchorSet:
    """Square anchors centred on each cell; cells row-major, sizes innermost."""
    sizes = tuple(sizes)
    if not sizes:
        raise ConfigError("anchor sizes must be non-empty")
    if feat_h < 1 or feat_w < 1:
        raise ConfigError(f"feature grid must be at least 1x1, got {feat_h}x{feat_w}")
    ys = (torch.arange(feat_h, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(feat_w, dtype=dtype) + 0.5) * stride
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    half = torch.tensor(sizes, dtype=dtype) / 2
    cx = cx.reshape(-1, 1)
    cy = cy.reshape(-1, 1)
    boxes = torch.stack([cx - half, cy - half, cx + half, cy + half], dim=-1).reshape(-1, 4)
    return AnchorSet(boxes, feat_h, feat_w, stride, sizes)


def _center_size(b: torch.Tensor) -> tuple[torch.Tensor, ...]:
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_deltas(anchors: torch.Tensor, gts: torch.Tensor) -> torch.Tensor:
    ax, ay, aw, ah = _center_size(anchors)
    gx, gy, gw, gh = _center_size(gts)
    if (aw <= 0).any() or (ah <= 0).any():
        raise CodingError("anchors must have positive width and height")
    if (gw <= 0).any() or (gh <= 0).any():
        raise CodingError("ground-truth boxes must have positive width and height")
    return torch.stack([(gx - ax) / aw, (gy - ay) / ah, torch.log(gw / aw), torch.log(gh / ah)], dim=-1)


def decode_boxes(anchors: torch.Tensor, deltas: torch.Tensor, image_size: tuple[int, int] | None = None,
                 max_log_ratio: float | None = None) -> torch.Tensor:
    """Inverse of :func:`encode_deltas`; optionally clamps size deltas and clips to ``(height, width)``."""
    ax, ay, aw, ah = _center_size(anchors)
    dx, dy, dw, dh = deltas.unbind(-1)
    if max_log_ratio is not None:
        dw = dw.clamp(max=max_log_ratio)
        dh = dh.clamp(max=max_log_ratio)
    cx = ax + dx * aw
    cy = ay + dy * ah
    w = aw * torch.exp(dw)
    h = ah * torch.exp(dh)
    boxes = torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1)
    if image_size is not None:
        boxes = clip_boxes(boxes, *image_size)
    return boxes


# --------------------------------------------------------------------------
# matching


def uniform_match(anchors: AnchorSet | torch.Tensor, gts: torch.Tensor, k: int = 4,
                  iou_neg_ignore: float = 0.7, iou_pos_min: float = 0.15) -> MatchAssignment:
    """Give every ground truth its ``k`` centre-nearest free anchors.

    Candidate (gt, anchor) pairs are taken in order of increasing centre
    distance, then gt index, then anchor index; a pair is accepted when the
    anchor is still free and the gt still has fewer than ``k`` positives. A
    contested anchor therefore goes to the nearer gt, and every gt ends with
    exactly ``k`` positives before ignore filtering.
    """
    boxes = anchors.boxes if isinstance(anchors, AnchorSet) else anchors
    a = boxes.shape[0]
    gts = gts.reshape(-1, 4).to(boxes.dtype)
    g = gts.shape[0]
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > a or k * g > a:
        raise ConfigError(f"cannot assign k={k} anchors to {g} boxes with only {a} anchors")
    labels = torch.full((a,), NEGATIVE, dtype=torch.long)
    if g == 0:
        return MatchAssignment(labels, labels.clone())

    ac = ((boxes[:, :2] + boxes[:, 2:]) / 2).double().numpy()
    gc = ((gts[:, :2] + gts[:, 2:]) / 2).double().numpy()
    # squared distance orders pairs exactly like the distance itself
    dist = ((gc[:, None, :] - ac[None, :, :]) ** 2).sum(-1)  # (g, a)
    gi, ai = np.meshgrid(np.arange(g), np.arange(a), indexing="ij")
    order = np.lexsort((ai.ravel(), gi.ravel(), dist.ravel()))
    counts = np.zeros(g, dtype=np.int64)
    owner = np.full(a, -1, dtype=np.int64)
    remaining = g
    for flat in order:
        gt, anc = divmod(int(flat), a)
        if owner[anc] >= 0 or counts[gt] >= k:
            continue
        owner[anc] = gt
        counts[gt] += 1
        if counts[gt] == k:
            remaining -= 1
            if remaining == 0:
                break
    labels = torch.from_numpy(owner)
    pre = labels.clone()

    iou = pairwise_iou(boxes, gts)  # (a, g)
    neg = labels < 0
    labels[neg & (iou.max(dim=1).values > iou_neg_ignore)] = IGNORE
    pos = torch.nonzero(~neg).flatten()
    weak = iou[pos, labels[pos]] < iou_pos_min
    labels[pos[weak]] = IGNORE
    return MatchAssignment(labels, pre)


# --------------------------------------------------------------------------
# losses


def focal_loss_elementwise(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25,
                           gamma: float = 2.0) -> torch.Tensor:
    p = torch.sigmoid(logits)
    floor = math.log(1e-12)
    log_p = F.logsigmoid(logits).clamp_min(floor)
    log_1mp = F.logsigmoid(-logits).clamp_min(floor)
    pos = -alpha * (1 - p) ** gamma * log_p
    neg = -(1 - alpha) * p**gamma * log_1mp
    return torch.where(targets > 0.5, pos, neg)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, alpha: float = 0.25, gamma: float = 2.0,
               normalizer: float | None = None) -> torch.Tensor:
    """Sigmoid focal loss summed over elements and divided by the positive count (min 1).

    Pass only non-ignored anchors. ``targets`` is one-hot of the same shape as
    ``logits``; the default normalizer counts its positive rows.
    """
    if normalizer is None:
        t = targets.reshape(-1, targets.shape[-1]) if targets.dim() > 1 else targets.reshape(-1, 1)
        normalizer = float((t > 0.5).any(dim=-1).sum())
    return focal_loss_elementwise(logits, targets, alpha, gamma).sum() / max(1.0, normalizer)


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean of ``1 - GIoU`` over aligned box pairs (0 for an empty set)."""
    if pred.numel() == 0:
        return pred.sum() * 0
    g, _ = giou(pred, gt)
    return (1 - g).mean()


# --------------------------------------------------------------------------
# prediction and inference


def predict(t_cls: FeatureMap, t_reg: FeatureMap, num_classes: int, K: int,
            params: Scope) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-anchor class logits (N, cells*K, classes) and box deltas (N, cells*K, 4)."""
    if t_cls.shape[:3] != t_reg.shape[:3]:
        raise ShapeError(f"t_cls {t_cls.shape} and t_reg {t_reg.shape} differ spatially")
    n, h, w, _ = t_cls.shape
    pc = params.scope("cls")
    wc = pc.get("weight", (t_cls.channels, K * num_classes))
    bc = pc.get("bias", (K * num_classes,), focal_prior(0.01))
    pr = params.scope("reg")
    wr = pr.get("weight", (t_reg.channels, K * 4))
    br = pr.get("bias", (K * 4,), "zeros")
    logits = linear(t_cls.data, wc, bc).reshape(n, h * w * K, num_classes)
    deltas = linear(t_reg.data, wr, br).reshape(n, h * w * K, 4)
    return logits, deltas


def nms(dets: Detections, iou_thresh: float = 0.6, score_thresh: float = 0.05,
        max_dets: int = 100) -> Detections:
    """Class-wise greedy suppression by descending score."""
    boxes, labels, scores = dets.tensors()
    keep = scores >= score_thresh
    boxes, labels, scores = boxes[keep], labels[keep], scores[keep]
    idx = _nms_indices(boxes, scores, labels, iou_thresh)[:max_dets]
    return Detections.from_tensors(boxes[idx], labels[idx], scores[idx])


def _nms_indices(boxes, scores, labels, iou_thresh) -> torch.Tensor:
    if boxes.numel() == 0:
        return torch.zeros(0, dtype=torch.long)
    # batched_nms returns indices sorted by decreasing score
    return batched_nms(boxes.double(), scores.double(), labels, iou_thresh)


def postprocess(logits: torch.Tensor, deltas: torch.Tensor, anchors: AnchorSet,
                image_size: tuple[int, int], score_thresh: float = 0.05, iou_thresh: float = 0.6,
                max_dets: int = 100, pre_nms: int = 1000) -> Detections:
    """Decode one image's raw outputs into clipped, suppressed detections."""
    with torch.no_grad():
        scores = torch.sigmoid(logits.detach().double()).flatten()
        num_classes = logits.shape[-1]
        cand = torch.nonzero(scores > score_thresh).flatten()
        if cand.numel() > pre_nms:
            cand = cand[scores[cand].topk(pre_nms).indices]
        anchor_idx = cand // num_classes
        labels = cand % num_classes
        boxes = decode_boxes(anchors.boxes[anchor_idx].double(), deltas.detach()[anchor_idx].double(),
                             image_size, MAX_LOG_RATIO)
        s = scores[cand]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, labels, s = boxes[valid], labels[valid], s[valid]
        idx = _nms_indices(boxes, s, labels, iou_thresh)[:max_dets]
        return Detections.from_tensors(boxes[idx], labels[idx], s[idx])
