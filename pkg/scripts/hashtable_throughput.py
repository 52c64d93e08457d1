#!/usr/bin/env python3
"""Hashtable inserts per virtual second as p grows, with conservation checks."""

import argparse
import time

from windlass.apps import run_hashtable
from windlass.fabric import Fabric, FabricConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--p", type=int, nargs="+", default=[2, 4, 8, 16])
    ap.add_argument("--inserts", type=int, default=4096, help="per rank")
    ap.add_argument("--seed", type=int, default=42)
    args = ap.parse_args()

    print("p,inserts,lost,verify_ok,inserts_per_virtual_s,wall_s")
    for p in args.p:
        t0 = time.monotonic()
        out = run_hashtable(Fabric(FabricConfig(p=p, seed=args.seed)), args.inserts, seed=args.seed)
        print(f"{p},{out['attempted']},{out['lost']},{out['multiset_ok']},"
              f"{out['inserts_per_s_virtual']:.0f},{time.monotonic() - t0:.2f}")


if __name__ == "__main__":
    main()
