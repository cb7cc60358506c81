import pytest
import torch

from dfft.config import micro_config
from dfft.data import synth_dataset
from dfft.model import Detector
from helpers import tiny_config


@pytest.mark.parametrize("size", [128, 256])
def test_forward_shapes(size):
    cfg = micro_config(image_size=size)
    det = Detector(cfg)
    with torch.no_grad():
        out = det.forward(torch.zeros(2, size, size, 3))
    cells = (size // 32) ** 2
    assert out.s_sae.shape == (2, size // 32, size // 32, 256) and out.s_sae.stride == 32
    assert out.t_cls.channels == 256 and out.t_reg.channels == 512
    assert out.logits.shape == (2, cells * 5, 2) and out.deltas.shape == (2, cells * 5, 4)


def test_store_is_frozen_after_construction():
    det = Detector(tiny_config())
    n = len(det.params)
    with torch.no_grad():
        det.forward(torch.zeros(1, 128, 128, 3))  # other sizes reuse the same weights
    assert len(det.params) == n


def test_loss_terms_and_positive_count():
    cfg = tiny_config()
    det = Detector(cfg)
    data = synth_dataset(2, 64, 0)
    out = det.forward(det.normalize(torch.stack([s.pixels for s in data])))
    losses = det.loss(out, [(s.boxes, s.labels) for s in data])
    assert all(torch.isfinite(losses[k]) for k in ("loss", "cls_loss", "reg_loss"))
    assert 0 < losses["num_pos"] <= cfg.head.k * sum(len(s.boxes) for s in data)
    expect = cfg.head.cls_weight * losses["cls_loss"] + cfg.head.reg_weight * losses["reg_loss"]
    torch.testing.assert_close(losses["loss"], expect)


def test_image_without_objects_has_zero_regression_loss():
    det = Detector(tiny_config())
    out = det.forward(torch.zeros(1, 64, 64, 3))
    losses = det.loss(out, [(torch.zeros(0, 4), torch.zeros(0, dtype=torch.long))])
    assert float(losses["reg_loss"].detach()) == 0.0 and losses["num_pos"] == 0


def test_detect_returns_valid_detections():
    det = Detector(tiny_config())
    res = det.detect(torch.rand(2, 64, 64, 3))
    assert len(res) == 2
    for d in res:
        scores = [x.score for x in d]
        assert scores == sorted(scores, reverse=True)
        for x in d:
            assert 0 <= x.box.x1 <= x.box.x2 <= 64 and 0 <= x.box.y1 <= x.box.y2 <= 64
