#!/usr/bin/env python3
"""Random lock traffic over many seeds plus bounded schedule exploration."""

import argparse
import sys

from windlass.verify import explore_lock_scenario, run_lock_workload


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--p", type=int, default=8)
    ap.add_argument("--ops", type=int, default=1000)
    ap.add_argument("--depth", type=int, default=10, help="explorer decision bound")
    args = ap.parse_args()

    bad = 0
    for seed in range(args.seeds):
        res = run_lock_workload(args.p, seed, args.ops)
        if any(res.final_words):
            bad += 1
        print(f"seed {seed}: {res.grants} grants, {res.virtual_time * 1e3:.3f} ms virtual, "
              f"words {'clean' if not any(res.final_words) else res.final_words}")
    plans = [[("lock", 0, "exclusive"), ("unlock", 0)],
             [("lock", 0, "shared"), ("unlock", 0)],
             [("lock_all",), ("unlock_all",)]]
    ex = explore_lock_scenario(plans, max_decisions=args.depth)
    print(f"exploration: {ex.schedules} schedules, {ex.truncated} cut at depth {args.depth}, "
          f"{len(ex.failures)} violations")
    sys.exit(1 if bad or ex.failures else 0)


if __name__ == "__main__":
    main()
