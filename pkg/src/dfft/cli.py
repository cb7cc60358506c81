"""Command-line entry point: ``dfft {train,eval,infer,flops,plot}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt_io
from .config import load_config
from .data import load_image, parse_data_spec
from .errors import DFFTError
from .flops import compare_single_vs_multilevel, macs_model


def _train(args) -> int:
    from .train import set_deterministic, train

    set_deterministic(args.deterministic)
    cfg = load_config(args.config)
    data = parse_data_spec(args.data, cfg.image_size, cfg.train.seed)
    result = train(cfg, data, args.out, resume=args.resume)
    last = result.log[-1] if result.log else {}
    print(json.dumps({"epochs": result.checkpoint.epoch, "steps": result.checkpoint.step, **last}))
    return 0


def _eval(args) -> int:
    from .train import evaluate, set_deterministic

    set_deterministic(args.deterministic)
    ck = ckpt_io.load(args.ckpt)
    size = json.loads(ck.config_json)["image_size"]
    data = parse_data_spec(args.data, size, args.seed)
    metrics = evaluate(ck, data)
    metrics["per_class"] = {str(k): v for k, v in metrics["per_class"].items()}
    print(json.dumps(metrics))
    return 0


def _infer(args) -> int:
    from .train import detector_from_checkpoint

    det = detector_from_checkpoint(ckpt_io.load(args.ckpt))
    pixels, scale = load_image(args.image, det.cfg.image_size)
    dets = det.detect(pixels[None])[0]
    image_id = args.id or Path(args.image).stem
    out = open(args.out, "w") if args.out and args.out != "-" else sys.stdout
    try:
        for d in dets:
            box = [round(v / scale, 3) for v in d.box.as_list()]
            out.write(json.dumps({"id": image_id, "box": box, "class": d.label, "score": round(d.score, 6)}) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _flops(args) -> int:
    cfg = load_config(args.config)
    w = args.width or cfg.image_size
    h = args.height or cfg.image_size
    rep = macs_model(cfg, h, w)
    single, multi, ratio = compare_single_vs_multilevel(cfg, h, w)
    print(rep.to_text())
    print(f"\nsingle-level neck+head {single:,d}  four-level head {multi:,d}  ratio {ratio:.4f}")
    if args.csv:
        Path(args.csv).write_text(rep.to_csv())
    else:
        print()
        print(rep.to_csv(), end="")
    return 0


def _plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .train import read_log

    rows = read_log(args.log)
    metric = args.metric
    pts = [(r["epoch"], r[metric]) for r in rows if r.get(metric) is not None]
    if not pts:
        raise DFFTError(f"log {args.log} has no values for {metric!r}")
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o" if len(pts) < 40 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel({"ap50": "AP50", "mean_loss": "loss"}.get(metric, metric))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(args.out)
    plt.close(fig)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dfft", description="Decoder-free transformer detector toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True, help="synth | synth:N | coco:IMAGES_DIR,ANNOTATIONS")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.add_argument("--deterministic", action="store_true", help="single-threaded, deterministic kernels")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="COCO-style AP of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--seed", type=int, default=0, help="seed for synthetic data")
    e.add_argument("--deterministic", action="store_true")
    e.set_defaults(func=_eval)

    i = sub.add_parser("infer", help="detect objects in one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--out", default="-", help="JSON-lines output (default stdout)")
    i.add_argument("--id", default=None)
    i.set_defaults(func=_infer)

    f = sub.add_parser("flops", help="analytic MAC report")
    f.add_argument("--config", required=True)
    f.add_argument("--width", type=int, default=None)
    f.add_argument("--height", type=int, default=None)
    f.add_argument("--csv", default=None, help="write (name, macs) rows here")
    f.set_defaults(func=_flops)

    pl = sub.add_parser("plot", help="convergence curve from a training log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out", required=True)
    pl.add_argument("--metric", default="mean_loss", choices=["mean_loss", "cls_loss", "reg_loss", "ap50", "lr"])
    pl.set_defaults(func=_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (DFFTError, OSError, KeyError, ValueError) as e:
        print(f"dfft {args.command}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
