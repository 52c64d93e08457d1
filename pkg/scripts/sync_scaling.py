#!/usr/bin/env python3
"""Fence, PSCW ring and lock/unlock cost against p, written as CSV."""

import argparse
import sys

from windlass import bench as B
from windlass.errors import DegenerateFit


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max-p", type=int, default=256)
    ap.add_argument("--samples", type=int, default=3)
    ap.add_argument("--k", type=int, nargs="+", default=[1, 2, 4, 8])
    ap.add_argument("--output", default="-")
    args = ap.parse_args()

    ps = [1 << i for i in range(1, args.max_p.bit_length())]
    results = [B.bench_sync("fence", ps, args.samples),
               B.bench_sync("lock_unlock", ps, args.samples)]
    for k in args.k:
        results.append(B.bench_sync("pscw_ring", [p for p in ps if p > k], args.samples, k=k))
    try:
        fit = B.fit_model(results[0], "log_p")
        print(f"fence: {fit.slope * 1e6:.3f} us per log2(p) round, residual {fit.residual:.2e}",
              file=sys.stderr)
    except DegenerateFit as exc:
        print(f"fence fit skipped: {exc}", file=sys.stderr)
    text = B.to_csv(results)
    if args.output == "-":
        sys.stdout.write(text)
    else:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)


if __name__ == "__main__":
    main()
