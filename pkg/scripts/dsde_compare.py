#!/usr/bin/env python3
"""Accumulate-based DSDE against the counting baseline over a range of p."""

import argparse

from windlass.apps import run_dsde
from windlass.fabric import Fabric, FabricConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, nargs="+", default=[8, 16, 32, 64, 128])
    ap.add_argument("--k", type=int, default=6)
    ap.add_argument("--rounds", type=int, default=20)
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    print("p,protocol,exactly_once,exchange_ops,counting_ops,virtual_us_per_round")
    for p in args.p:
        for baseline in (False, True):
            out = run_dsde(Fabric(FabricConfig(p=p, seed=args.seed)), args.k, args.rounds,
                           args.seed, baseline=baseline)
            name = "counting" if baseline else "accumulate"
            print(f"{p},{name},{out['exactly_once']},{max(out['exchange_ops_per_rank'])},"
                  f"{min(out['counting_ops_per_rank'])},{out['virtual_s'] / args.rounds * 1e6:.3f}")


if __name__ == "__main__":
    main()
