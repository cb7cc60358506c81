"""Datasets: a deterministic synthetic shapes set and a COCO-format loader."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .errors import DFFTError
from .primitives import FeatureMap

SYNTH_CLASSES = ("rectangle", "ellipse")

_PALETTE = np.array(
    [
        [0.95, 0.15, 0.15],
        [0.15, 0.85, 0.20],
        [0.20, 0.30, 0.95],
        [0.95, 0.85, 0.10],
        [0.90, 0.20, 0.90],
        [0.10, 0.90, 0.90],
        [1.00, 0.55, 0.05],
        [0.98, 0.98, 0.98],
    ]
)


class DataError(DFFTError):
    pass


@dataclass
class Sample:
    image: FeatureMap  # (1, H, W, 3), values in [0, 1], stride 1
    boxes: torch.Tensor  # (G, 4) corner form, pixels
    labels: torch.Tensor  # (G,) int64
    id: str

    def __post_init__(self):
        _, h, w, _ = self.image.shape
        if self.boxes.numel():
            b = self.boxes
            if (b[:, 0] < 0).any() or (b[:, 1] < 0).any() or (b[:, 2] > w).any() or (b[:, 3] > h).any():
                raise DataError(f"sample {self.id}: box outside {w}x{h} image")

    @property
    def pixels(self) -> torch.Tensor:
        return self.image.data[0]


def _ellipse_mask(h: int, w: int, box: tuple[int, int, int, int]) -> np.ndarray:
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    rx, ry = (x2 - x1) / 2, (y2 - y1) / 2
    yy, xx = np.mgrid[0:h, 0:w]
    return ((xx + 0.5 - cx) / rx) ** 2 + ((yy + 0.5 - cy) / ry) ** 2 <= 1.0


def _shape_mask(h: int, w: int, kind: int, box: tuple[int, int, int, int]) -> np.ndarray:
    if kind == 0:
        mask = np.zeros((h, w), dtype=bool)
        x1, y1, x2, y2 = box
        mask[y1:y2, x1:x2] = True
        return mask
    return _ellipse_mask(h, w, box)


def mask_extent(mask: np.ndarray) -> tuple[int, int, int, int]:
    ys, xs = np.nonzero(mask)
    return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1


def synth_layout(rng: np.random.Generator, image_size: int, max_objects: int = 4,
                 min_size: int = 20, max_size: int = 56) -> list[tuple[int, tuple[int, int, int, int]]]:
    """Non-overlapping shapes whose centres fall in distinct stride-32 cells."""
    count = int(rng.integers(1, max_objects + 1))
    placed: list[tuple[int, tuple[int, int, int, int]]] = []
    cells: set[tuple[int, int]] = set()
    for _ in range(200):
        if len(placed) == count:
            break
        bw, bh = (int(v) for v in rng.integers(min_size, max_size + 1, size=2))
        x1 = int(rng.integers(0, image_size - bw + 1))
        y1 = int(rng.integers(0, image_size - bh + 1))
        box = (x1, y1, x1 + bw, y1 + bh)
        cell = (int((y1 + bh / 2) // 32), int((x1 + bw / 2) // 32))
        if cell in cells:
            continue
        if any(not (box[2] + 2 <= b[0] or b[2] + 2 <= box[0] or box[3] + 2 <= b[1] or b[3] + 2 <= box[1])
               for _, b in placed):
            continue
        kind = int(rng.integers(0, len(SYNTH_CLASSES)))
        placed.append((kind, box))
        cells.add(cell)
    return placed


def synth_dataset(n: int, image_size: int = 128, seed: int = 0) -> list[Sample]:
    """``n`` noisy images with 1-4 coloured rectangles/ellipses; class = shape type."""
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        img = rng.uniform(0.0, 0.35, size=(image_size, image_size, 3))
        colors = rng.permutation(len(_PALETTE))
        boxes, labels = [], []
        for j, (kind, box) in enumerate(synth_layout(rng, image_size)):
            mask = _shape_mask(image_size, image_size, kind, box)
            img[mask] = _PALETTE[colors[j]]
            boxes.append(mask_extent(mask))
            labels.append(kind)
        data = torch.from_numpy(img.astype(np.float32))[None]
        samples.append(
            Sample(
                FeatureMap(data, 1),
                torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
                torch.tensor(labels, dtype=torch.long),
                f"synth-{seed}-{i}",
            )
        )
    return samples


def letterbox(img: Image.Image, size: int) -> tuple[torch.Tensor, float]:
    """Resize so the longer side equals ``size``, pad bottom/right with zeros."""
    w, h = img.size
    scale = size / max(w, h)
    nw, nh = max(1, round(w * scale)), max(1, round(h * scale))
    resized = np.asarray(img.convert("RGB").resize((nw, nh), Image.BILINEAR), dtype=np.float32) / 255.0
    canvas = np.zeros((size, size, 3), dtype=np.float32)
    canvas[:nh, :nw] = resized
    return torch.from_numpy(canvas), scale


def load_image(path: str | Path, size: int) -> tuple[torch.Tensor, float]:
    with Image.open(path) as img:
        return letterbox(img, size)


def coco_bbox_to_corners(bbox) -> tuple[float, float, float, float]:
    x, y, w, h = (float(v) for v in bbox)
    return (x, y, x + w, y + h)


def load_coco(images_dir: str | Path, annotations_path: str | Path, image_size: int = 128) -> list[Sample]:
    """COCO-format annotations to letterboxed samples; crowd boxes skipped.

    Category ids are mapped to contiguous labels in ascending id order.
    """
    try:
        doc = json.loads(Path(annotations_path).read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{annotations_path}: malformed JSON at line {e.lineno}: {e.msg}") from None
    for key in ("images", "annotations", "categories"):
        if not isinstance(doc.get(key), list):
            raise DataError(f"{annotations_path}: missing '{key}' array")
    cat_ids = sorted(c["id"] for c in doc["categories"])
    label_of = {cid: i for i, cid in enumerate(cat_ids)}
    by_image: dict[int, list[dict]] = {}
    for ann in doc["annotations"]:
        by_image.setdefault(ann["image_id"], []).append(ann)

    samples = []
    for info in doc["images"]:
        path = Path(images_dir) / info["file_name"]
        if not path.exists():
            raise DataError(f"image {info['id']}: file not found: {path}")
        pixels, scale = load_image(path, image_size)
        boxes, labels = [], []
        for ann in by_image.get(info["id"], []):
            if ann.get("iscrowd", 0):
                continue
            x1, y1, x2, y2 = coco_bbox_to_corners(ann["bbox"])
            if x2 <= x1 or y2 <= y1:
                continue
            box = [min(max(v * scale, 0.0), float(image_size)) for v in (x1, y1, x2, y2)]
            boxes.append(box)
            labels.append(label_of[ann["category_id"]])
        samples.append(
            Sample(
                FeatureMap(pixels[None], 1),
                torch.tensor(boxes, dtype=torch.float32).reshape(-1, 4),
                torch.tensor(labels, dtype=torch.long),
                str(info["id"]),
            )
        )
    return samples


def hflip(pixels: torch.Tensor, boxes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    w = pixels.shape[-2]
    flipped = boxes.clone()
    flipped[:, 0] = w - boxes[:, 2]
    flipped[:, 2] = w - boxes[:, 0]
    return pixels.flip(-2), flipped


def parse_data_spec(spec: str, image_size: int, seed: int = 0) -> list[Sample]:
    """``synth``, ``synth:N`` or ``coco:IMAGES_DIR,ANNOTATIONS``."""
    if spec == "synth" or spec.startswith("synth:"):
        n = int(spec.split(":", 1)[1]) if ":" in spec else 20
        return synth_dataset(n, image_size, seed)
    if spec.startswith("coco:"):
        parts = spec[5:].split(",")
        if len(parts) != 2:
            raise DataError("coco data spec must be coco:IMAGES_DIR,ANNOTATIONS_JSON")
        return load_coco(parts[0], parts[1], image_size)
    raise DataError(f"unknown data spec {spec!r}")
