"""Training loop, learning-rate schedule, checkpoint (re)construction and evaluation."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig, config_from_dict
from .data import Sample, hflip
from .errors import ConfigError, TrainingDiverged
from .evaluate import evaluate_detections
from .model import Detector
from .params import ParamStore

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "mean_loss", "cls_loss", "reg_loss", "lr", "ap50")
CHECKPOINT_NAME = "last.dfft"


def lr_milestones(train: TrainConfig) -> list[int]:
    """Epoch counts after which the learning rate is multiplied by ``lr_gamma``."""
    return [int(math.floor(f * train.epochs + 1e-9)) for f in train.lr_steps]


def lr_at_epoch(train: TrainConfig, epoch: int) -> float:
    """Learning rate used during 0-based ``epoch``."""
    drops = sum(epoch >= m for m in lr_milestones(train))
    return train.lr * train.lr_gamma**drops


def set_deterministic(enabled: bool = True) -> None:
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _no_decay(name: str, t: torch.Tensor) -> bool:
    return t.dim() < 2 or "norm" in name or name.endswith("rel_bias") or name.endswith("log_temperature")


def make_optimizer(store: ParamStore, train: TrainConfig) -> torch.optim.AdamW:
    decay = [t for n, t in store.items() if not _no_decay(n, t)]
    plain = [t for n, t in store.items() if _no_decay(n, t)]
    groups = [{"params": decay, "weight_decay": train.weight_decay}, {"params": plain, "weight_decay": 0.0}]
    return torch.optim.AdamW(groups, lr=train.lr, foreach=False)


def _optimizer_tensors(store: ParamStore, opt: torch.optim.Optimizer) -> dict[str, torch.Tensor]:
    out = {}
    for name, t in store.items():
        st = opt.state.get(t)
        if st:
            out[f"optim/exp_avg/{name}"] = st["exp_avg"]
            out[f"optim/exp_avg_sq/{name}"] = st["exp_avg_sq"]
    return out


def _restore_optimizer(store: ParamStore, opt: torch.optim.Optimizer, ck: Checkpoint) -> None:
    m, v = ck.optim("exp_avg"), ck.optim("exp_avg_sq")
    if ck.step == 0:
        return
    for name, t in store.items():
        if name in m:
            opt.state[t] = {
                "step": torch.tensor(float(ck.step)),
                "exp_avg": m[name].clone().to(t.dtype),
                "exp_avg_sq": v[name].clone().to(t.dtype),
            }


def make_checkpoint(det: Detector, opt: torch.optim.Optimizer | None, epoch: int, step: int) -> Checkpoint:
    tensors = {f"param/{n}": t.detach().clone() for n, t in det.params.items()}
    if opt is not None:
        tensors.update({k: v.detach().clone() for k, v in _optimizer_tensors(det.params, opt).items()})
    return Checkpoint(det.cfg.to_json(), epoch, step, tensors)


def detector_from_checkpoint(ck: Checkpoint) -> Detector:
    cfg = config_from_dict(json.loads(ck.config_json))
    store = ParamStore(cfg.train.seed)
    store.load_state(ck.params())
    return Detector(cfg, store)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


def _batch_tensors(det: Detector, samples: list[Sample], flips: np.ndarray):
    pixels, targets = [], []
    for s, flip in zip(samples, flips):
        px, boxes = s.pixels, s.boxes
        if flip:
            px, boxes = hflip(px, boxes)
        pixels.append(px)
        targets.append((boxes, s.labels))
    return det.normalize(torch.stack(pixels)), targets


@dataclass
class TrainResult:
    checkpoint: Checkpoint | None
    log: list[dict] = field(default_factory=list)
    touched: set[str] = field(default_factory=set)
    stopped_early: bool = False
    detector: Detector | None = None


def evaluate_model(det: Detector, dataset: list[Sample], batch_size: int = 8) -> dict:
    dets = []
    for i in range(0, len(dataset), batch_size):
        chunk = dataset[i:i + batch_size]
        dets.extend(det.detect(torch.stack([s.pixels for s in chunk])))
    return evaluate_detections(dets, [s.boxes for s in dataset], [s.labels for s in dataset], det.cfg.num_classes)


def evaluate(checkpoint: Checkpoint | str | Path, dataset: list[Sample]) -> dict:
    ck = checkpoint if isinstance(checkpoint, Checkpoint) else ckpt_io.load(checkpoint)
    det = detector_from_checkpoint(ck)
    for s in dataset:
        if s.labels.numel() and int(s.labels.max()) >= det.cfg.num_classes:
            raise ConfigError(f"sample {s.id} has class id beyond num_classes={det.cfg.num_classes}")
    return evaluate_model(det, dataset)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def train(cfg: ModelConfig, dataset: list[Sample], out_dir: str | Path | None = None,
          resume: Checkpoint | str | Path | None = None, eval_set: list[Sample] | None = None,
          track_grads: bool = False, stop_after_epoch: int | None = None) -> TrainResult:
    """Train ``cfg`` on ``dataset``; writes ``last.dfft`` and ``log.csv`` under ``out_dir``.

    ``stop_after_epoch`` ends the run early (for resume tests) while keeping the
    schedule of the full ``cfg.train.epochs``.
    """
    if not dataset:
        raise ConfigError("dataset is empty")
    tc = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    start_epoch, step = 0, 0
    if resume is not None:
        ck = resume if isinstance(resume, Checkpoint) else ckpt_io.load(resume)
        det = detector_from_checkpoint(ck)
        if det.cfg.to_json() != cfg.to_json():
            log.warning("resuming with a config that differs from the checkpoint's; using the checkpoint's")
        cfg, tc = det.cfg, det.cfg.train
        opt = make_optimizer(det.params, tc)
        _restore_optimizer(det.params, opt, ck)
        start_epoch, step = ck.epoch, ck.step
    else:
        det = Detector(cfg)
        opt = make_optimizer(det.params, tc)

    csv_path = out / "log.csv" if out is not None else None
    if csv_path is not None and (resume is None or not csv_path.exists()):
        with csv_path.open("w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(LOG_FIELDS)

    result = TrainResult(None)
    completed = start_epoch
    eval_set = eval_set if eval_set is not None else dataset
    last_epoch = tc.epochs if stop_after_epoch is None else min(tc.epochs, stop_after_epoch)
    n = len(dataset)

    for epoch in range(start_epoch, last_epoch):
        lr = lr_at_epoch(tc, epoch)
        for g in opt.param_groups:
            g["lr"] = lr
        order = epoch_order(n, tc.seed, epoch)
        flips = (
            np.random.default_rng([tc.seed, epoch, 0xF11B]).random(n) < 0.5
            if tc.hflip else np.zeros(n, dtype=bool)
        )
        sums = {"loss": 0.0, "cls_loss": 0.0, "reg_loss": 0.0}
        batches = 0
        for b in range(0, n, tc.batch_size):
            idx = order[b:b + tc.batch_size]
            images, targets = _batch_tensors(det, [dataset[i] for i in idx], flips[idx])
            losses = det.loss(det.forward(images), targets)
            if not torch.isfinite(losses["loss"]):
                good = make_checkpoint(det, opt, epoch, step)
                if out is not None:
                    ckpt_io.save(good, out / CHECKPOINT_NAME)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, step {step + 1}: "
                    f"cls={float(losses['cls_loss'].detach())} reg={float(losses['reg_loss'].detach())}; "
                    "last good state saved" + (f" to {out / CHECKPOINT_NAME}" if out else "")
                )
            opt.zero_grad(set_to_none=True)
            losses["loss"].backward()
            if track_grads:
                result.touched.update(
                    name for name, t in det.params.items() if t.grad is not None and bool(t.grad.abs().sum() > 0)
                )
            if tc.grad_clip:
                torch.nn.utils.clip_grad_norm_(det.params.parameters(), tc.grad_clip, foreach=False)
            opt.step()
            step += 1
            batches += 1
            for k in sums:
                sums[k] += float(losses[k].detach())
            if tc.max_steps is not None and step >= tc.max_steps:
                break

        row = {
            "epoch": epoch + 1,
            "mean_loss": sums["loss"] / batches,
            "cls_loss": sums["cls_loss"] / batches,
            "reg_loss": sums["reg_loss"] / batches,
            "lr": lr,
            "ap50": None,
        }
        done = epoch + 1 == last_epoch or (tc.max_steps is not None and step >= tc.max_steps)
        if tc.eval_every and ((epoch + 1) % tc.eval_every == 0 or done):
            row["ap50"] = evaluate_model(det, eval_set)["AP50"]
            if tc.target_ap50 is not None and row["ap50"] >= tc.target_ap50:
                done = True
                result.stopped_early = epoch + 1 < last_epoch
        result.log.append(row)
        log.info("epoch %d  loss %.4f  cls %.4f  reg %.4f  lr %.2e  ap50 %s", row["epoch"], row["mean_loss"],
                 row["cls_loss"], row["reg_loss"], lr, row["ap50"])
        if csv_path is not None:
            with csv_path.open("a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[k]) for k in LOG_FIELDS])

        completed = epoch + 1
        if out is not None and (done or (tc.checkpoint_every and completed % tc.checkpoint_every == 0)):
            ckpt_io.save(make_checkpoint(det, opt, completed, step), out / CHECKPOINT_NAME)
        if done:
            break
    result.checkpoint = make_checkpoint(det, opt, completed, step)
    result.detector = det
    return result


def read_log(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k, v in r.items():
            r[k] = None if v == "" else (int(v) if k == "epoch" else float(v))
    return rows
