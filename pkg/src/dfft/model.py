"""Full detector: backbone -> SAE -> TAE -> head, plus training loss and inference."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .backbone import BackboneOutput, forward_backbone
from .config import ModelConfig
from .encoders import sae, tae
from .head import (
    MAX_LOG_RATIO,
    AnchorSet,
    Detections,
    decode_boxes,
    focal_loss,
    generate_anchors,
    giou_loss,
    postprocess,
    predict,
    uniform_match,
)
from .params import ParamStore
from .primitives import FeatureMap


@dataclass
class ForwardOutput:
    backbone: BackboneOutput
    s_sae: FeatureMap
    t_cls: FeatureMap
    t_reg: FeatureMap
    logits: torch.Tensor  # (N, anchors, classes)
    deltas: torch.Tensor  # (N, anchors, 4)


class Detector:
    """Binds a :class:`ModelConfig` to a :class:`ParamStore`."""

    def __init__(self, cfg: ModelConfig, params: ParamStore | None = None, dtype=torch.float32):
        self.cfg = cfg
        self.params = params if params is not None else ParamStore(cfg.train.seed, dtype)
        if len(self.params) == 0:
            with torch.no_grad():
                self.forward(torch.zeros(1, cfg.image_size, cfg.image_size, 3, dtype=self.params.dtype))
        self.params.freeze()
        self._anchors: dict[tuple[int, int], AnchorSet] = {}

    @property
    def image_size(self) -> tuple[int, int]:
        return (self.cfg.image_size, self.cfg.image_size)

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        """Map [0, 1] RGB images (N, H, W, 3) to normalized network input."""
        mean = torch.tensor(self.cfg.input.pixel_mean, dtype=images.dtype)
        std = torch.tensor(self.cfg.input.pixel_std, dtype=images.dtype)
        return (images - mean) / std

    def anchors(self, feat_h: int, feat_w: int) -> AnchorSet:
        key = (feat_h, feat_w)
        if key not in self._anchors:
            self._anchors[key] = generate_anchors(feat_h, feat_w, 32, self.cfg.head.anchor_sizes)
        return self._anchors[key]

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        """``images``: normalized (N, H, W, 3) tensor."""
        p = self.params.scope("")
        x = FeatureMap(images.to(self.params.dtype), 1)
        bb = forward_backbone(x, self.cfg.backbone, p.scope("backbone"))
        s = sae(bb, self.cfg.encoder, p.scope("sae"))
        t_cls, t_reg = tae(s, self.cfg.encoder, p.scope("tae"))
        logits, deltas = predict(t_cls, t_reg, self.cfg.num_classes, self.cfg.head.K, p.scope("head"))
        return ForwardOutput(bb, s, t_cls, t_reg, logits, deltas)

    def loss(self, out: ForwardOutput, targets: list[tuple[torch.Tensor, torch.Tensor]]) -> dict[str, torch.Tensor]:
        """Focal + weighted GIoU loss over a batch.

        ``targets`` holds per-image ``(boxes (G, 4), labels (G,))``.
        """
        h = self.cfg.head
        n = out.logits.shape[0]
        anchors = self.anchors(out.t_cls.height, out.t_cls.width)
        img_h = out.t_cls.height * 32
        img_w = out.t_cls.width * 32
        cls_logits, cls_targets, pred_boxes, gt_boxes = [], [], [], []
        for i in range(n):
            boxes, labels = targets[i]
            m = uniform_match(anchors, boxes, h.k, h.iou_neg_ignore, h.iou_pos_min)
            valid = ~m.ignored
            onehot = torch.zeros(len(anchors), self.cfg.num_classes, dtype=out.logits.dtype)
            pos = torch.nonzero(m.positive).flatten()
            if pos.numel():
                onehot[pos, labels[m.labels[pos]]] = 1.0
                pred = decode_boxes(anchors.boxes[pos].to(out.deltas.dtype), out.deltas[i, pos],
                                    max_log_ratio=MAX_LOG_RATIO)
                pred_boxes.append(pred)
                gt_boxes.append(boxes[m.labels[pos]].to(out.deltas.dtype))
            cls_logits.append(out.logits[i, valid])
            cls_targets.append(onehot[valid])
        num_pos = sum(b.shape[0] for b in pred_boxes)
        cls = focal_loss(torch.cat(cls_logits), torch.cat(cls_targets), h.focal_alpha, h.focal_gamma,
                         normalizer=num_pos)
        if pred_boxes:
            reg = giou_loss(torch.cat(pred_boxes), torch.cat(gt_boxes))
        else:
            reg = out.deltas.sum() * 0
        total = h.cls_weight * cls + h.reg_weight * reg
        return {"loss": total, "cls_loss": cls, "reg_loss": reg, "num_pos": num_pos}

    @torch.no_grad()
    def detect(self, images: torch.Tensor) -> list[Detections]:
        """Run inference on raw [0, 1] images (N, H, W, 3)."""
        out = self.forward(self.normalize(images))
        anchors = self.anchors(out.t_cls.height, out.t_cls.width)
        size = (images.shape[1], images.shape[2])
        h = self.cfg.head
        return [
            postprocess(out.logits[i], out.deltas[i], anchors, size, h.score_thresh, h.nms_iou, h.max_dets)
            for i in range(images.shape[0])
        ]
