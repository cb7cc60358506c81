"""Overfit the micro configuration on a small synthetic set and report training-set AP.

    python scripts/overfit_synth.py --out runs/overfit
"""
import argparse
import json
import time

from dfft.config import micro_config
from dfft.data import synth_dataset
from dfft.train import evaluate, set_deterministic, train


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--images", type=int, default=20)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--max-steps", type=int, default=2000)
    p.add_argument("--target", type=float, default=0.90, help="stop once training-set AP50 reaches this")
    p.add_argument("--eval-every", type=int, default=5, help="epochs between AP50 evaluations")
    p.add_argument("--out", default=None, help="directory for log.csv and the checkpoint")
    args = p.parse_args()

    set_deterministic()
    data = synth_dataset(args.images, args.size, args.seed)
    cfg = micro_config(
        image_size=args.size,
        train=dict(lr=args.lr, batch_size=args.batch_size, epochs=10**6, max_steps=args.max_steps,
                   eval_every=args.eval_every, target_ap50=args.target, seed=args.seed,
                   checkpoint_every=args.eval_every if args.out else 0),
    )
    start = time.perf_counter()
    res = train(cfg, data, args.out)
    metrics = evaluate(res.checkpoint, data)
    metrics.pop("per_class")
    print(json.dumps({"steps": res.checkpoint.step, "epochs": res.checkpoint.epoch,
                      "seconds": round(time.perf_counter() - start, 1), **metrics}))


if __name__ == "__main__":
    main()
