#!/usr/bin/env python3
"""Fit the put/get latency model and the per-op issue cost.

Prints the fitted intercept and slope next to the configured constants.
"""

import argparse

from windlass import bench as B
from windlass.fabric import FabricConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alpha", type=float, default=1e-6, help="inter-node latency, seconds")
    ap.add_argument("--beta", type=float, default=0.16e-9, help="inter-node seconds per byte")
    ap.add_argument("--max-size", type=int, default=1 << 16)
    ap.add_argument("--samples", type=int, default=5)
    args = ap.parse_args()

    cfg = FabricConfig(alpha_inter=args.alpha, beta_inter=args.beta)
    sizes = [1 << i for i in range(args.max_size.bit_length())]
    print("kind  alpha_fit_us  beta_fit_ns_per_B  rel_err_alpha  rel_err_beta")
    for kind in ("put", "get"):
        fit = B.fit_model(B.bench_latency(kind, 2, sizes, args.samples, cfg))
        print(f"{kind:4}  {fit.intercept * 1e6:12.6f}  {fit.slope * 1e9:17.6f}  "
              f"{abs(fit.intercept / args.alpha - 1):13.2e}  {abs(fit.slope / args.beta - 1):12.2e}")
    for intra in (False, True):
        pt = B.bench_message_rate(2, 1000, intra=intra, samples=args.samples, config=cfg).points[0]
        print(f"{pt.bench}: {pt.median_s * 1e9:.1f} ns per operation")


if __name__ == "__main__":
    main()
