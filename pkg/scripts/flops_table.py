"""Tabulate analytic MACs across image sizes and compare against a four-level head.

    python scripts/flops_table.py --sizes 128 256 512 --config configs/micro.json
"""
import argparse

from dfft.config import load_config, micro_config
from dfft.flops import compare_single_vs_multilevel, macs_model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=None, help="JSON config (default: micro)")
    p.add_argument("--sizes", type=int, nargs="+", default=[128, 256, 512])
    args = p.parse_args()
    cfg = load_config(args.config) if args.config else micro_config()

    print(f"{'size':>6} {'backbone':>14} {'sae':>14} {'tae':>14} {'head':>12} {'total GMAC':>11} {'1-lvl/4-lvl':>12}")
    for s in args.sizes:
        g = macs_model(cfg, s, s).by_group()
        _, _, ratio = compare_single_vs_multilevel(cfg, s, s)
        total = sum(g.values())
        print(f"{s:>6} {g['backbone']:>14,d} {g['sae']:>14,d} {g['tae']:>14,d} {g['head']:>12,d} "
              f"{total / 1e9:>11.3f} {ratio:>12.4f}")


if __name__ == "__main__":
    main()
