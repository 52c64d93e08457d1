"""``windlass`` command line: benchmarks, motif apps and a self test.

Every flag can also be set through an environment variable named
``WINDLASS_<FLAG>`` (dashes become underscores), e.g. ``WINDLASS_P=16``.
Command-line flags win over the environment.

Exit codes: 0 success, 1 invariant violation or application error,
2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields
from typing import Sequence

from . import bench as B
from .errors import WindlassError
from .fabric import Fabric, FabricConfig, Mode

BENCHES = ("latency", "msgrate", "sync")
APPS = ("hashtable", "dsde", "dsde-baseline")
SYNC_KINDS = ("fence", "pscw_ring", "lock_unlock")


def parse_range(text: str) -> list[int]:
    """``start:end:x2`` (geometric), ``start:end:+n`` (arithmetic) or ``a,b,c``."""
    if ":" not in text:
        return [int(v) for v in text.split(",") if v]
    parts = text.split(":")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"bad range {text!r}; want start:end:x2 or start:end:+n")
    start, end, step = int(parts[0]), int(parts[1]), parts[2]
    out = []
    if step.startswith("x"):
        f = int(step[1:])
        if f < 2 or start < 1:
            raise argparse.ArgumentTypeError(f"geometric range {text!r} needs factor >= 2 and start >= 1")
        v = start
        while v <= end:
            out.append(v)
            v *= f
    elif step.startswith("+"):
        d = int(step[1:])
        if d < 1:
            raise argparse.ArgumentTypeError(f"arithmetic range {text!r} needs step >= 1")
        out = list(range(start, end + 1, d))
    else:
        raise argparse.ArgumentTypeError(f"bad step {step!r}; use xN or +N")
    if not out:
        raise argparse.ArgumentTypeError(f"range {text!r} is empty")
    return out


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"{v} must be >= 1")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{v} must be >= 0")
    return v


@dataclass
class RunSpec:
    command: str
    name: str | None = None
    p: int = 8
    ranks_per_node: int = 1
    seed: int = 42
    mode: str = Mode.DETERMINISTIC.value
    k: int = 6
    sizes: str = "1:65536:x2"
    p_list: str = "2:256:x2"
    samples: int = 100
    kind: str = "put"
    rounds: int = 100
    inserts: int = 16384
    batch: int = 1000
    C: int | None = None
    T: int | None = None
    H: int | None = None
    M: int | None = None
    format: str = "csv"
    output: str | None = None
    inject_fault: bool = False
    seeds: int = 5

    def argv(self) -> list[str]:
        """Flags reproducing this run through :func:`parse_args`."""
        out = [self.command] + ([self.name] if self.name else [])
        known = _dests(self.command)
        for f in fields(self):
            if f.name not in known:
                continue
            v = getattr(self, f.name)
            flag = "--" + f.name.replace("_", "-")
            if isinstance(v, bool):
                if v:
                    out.append(flag)
            elif v is not None:
                out += [flag, str(v)]
        return out


def _common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--p", type=_positive, default=8, help="number of ranks")
    sp.add_argument("--ranks-per-node", type=_positive, default=1)
    sp.add_argument("--seed", type=int, default=42)
    sp.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.DETERMINISTIC.value)
    sp.add_argument("--format", choices=("csv", "json"), default="csv")
    sp.add_argument("--output", default=None, help="file to write (default: stdout)")
    sp.add_argument("--C", type=_positive, default=None, help="matching ring capacity")
    sp.add_argument("--T", type=_positive, default=None, help="hashtable slots per rank")
    sp.add_argument("--H", type=_positive, default=None, help="hashtable heap entries per rank")
    sp.add_argument("--M", type=_positive, default=None, help="DSDE receive slots per rank")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="windlass", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="run a microbenchmark")
    b.add_argument("name", choices=BENCHES)
    _common(b)
    b.add_argument("--kind", default="put",
                   help="put|get for latency; fence|pscw_ring|lock_unlock for sync")
    b.add_argument("--sizes", default="1:65536:x2", help="sizes in bytes, start:end:x2|+n or a,b,c")
    b.add_argument("--p-list", default="2:256:x2", help="process counts for the sync bench")
    b.add_argument("--samples", type=_positive, default=100)
    b.add_argument("--batch", type=_positive, default=1000)
    b.add_argument("--k", type=_nonneg, default=2, help="ring neighbours for pscw_ring")

    a = sub.add_parser("app", help="run a motif application")
    a.add_argument("name", choices=APPS)
    _common(a)
    a.add_argument("--k", type=_nonneg, default=6)
    a.add_argument("--rounds", type=_positive, default=100)
    a.add_argument("--inserts", type=_positive, default=16384, help="hashtable inserts per rank")

    s = sub.add_parser("selftest", help="run built-in invariant checks")
    _common(s)
    s.add_argument("--seeds", type=_positive, default=5)
    s.add_argument("--inject-fault", action="store_true",
                   help="use a lock that skips its compare-and-swap; must fail")
    return ap


def _dests(command: str) -> set[str]:
    for action in build_parser()._actions:
        if isinstance(action, argparse._SubParsersAction):
            sp = action.choices[command]
            return {a.dest for a in sp._actions if a.option_strings and a.dest != "help"}
    return set()


def _apply_env(parser: argparse.ArgumentParser, env) -> None:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sp in action.choices.values():
                _apply_env(sp, env)
            continue
        if not action.option_strings or action.dest == "help":
            continue
        val = env.get("WINDLASS_" + action.dest.upper())
        if val is None:
            continue
        if isinstance(action, argparse._StoreTrueAction):
            action.default = val.lower() in ("1", "true", "yes", "on")
        else:
            action.default = val


def parse_args(argv: Sequence[str] | None = None, env=None) -> RunSpec:
    parser = build_parser()
    _apply_env(parser, os.environ if env is None else env)
    ns = parser.parse_args(argv)
    spec = RunSpec(command=ns.command)
    for f in fields(RunSpec):
        if hasattr(ns, f.name):
            setattr(spec, f.name, getattr(ns, f.name))
    # validate ranges up front so bad grammar is a usage error
    try:
        if spec.command == "bench":
            parse_range(spec.sizes)
            parse_range(spec.p_list)
    except (argparse.ArgumentTypeError, ValueError) as exc:
        parser.error(str(exc))
    return spec


def _fabric_config(spec: RunSpec, **over) -> FabricConfig:
    base = dict(p=spec.p, ranks_per_node=spec.ranks_per_node, seed=spec.seed, mode=Mode(spec.mode))
    base.update(over)
    return FabricConfig(**base)


def _emit(spec: RunSpec, results: list[B.BenchResult]) -> None:
    text = B.to_json(results) if spec.format == "json" else B.to_csv(results)
    if spec.output:
        with open(spec.output, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _run_bench(spec: RunSpec) -> list[B.BenchResult]:
    cfg = _fabric_config(spec)
    if spec.name == "latency":
        return [B.bench_latency(spec.kind, spec.p, parse_range(spec.sizes), spec.samples, cfg)]
    if spec.name == "msgrate":
        return [B.bench_message_rate(spec.p, spec.batch, intra=False, config=cfg),
                B.bench_message_rate(spec.p, spec.batch, intra=True, config=cfg)]
    kind = spec.kind if spec.kind in SYNC_KINDS else "fence"
    return [B.bench_sync(kind, parse_range(spec.p_list), spec.samples, spec.k, cfg)]


def _run_app(spec: RunSpec) -> tuple[list[B.BenchResult], bool]:
    from .apps import run_dsde, run_hashtable

    fabric = Fabric(_fabric_config(spec))
    if spec.name == "hashtable":
        out = run_hashtable(fabric, spec.inserts, spec.T, spec.H, spec.seed)
        ok = out["lost"] == 0 and out["global_count"] == out["found"]
        pt = B.BenchPoint("hashtable", spec.p, 8, out["attempted"], out["virtual_s"], 0,
                          {"inserts_per_s_virtual": out["inserts_per_s_virtual"],
                           "delivered": out["found"], "ok": ok})
        return [B.BenchResult("hashtable", [pt], B._cfg(fabric.config))], ok
    out = run_dsde(fabric, spec.k, spec.rounds, spec.seed, baseline=spec.name == "dsde-baseline",
                   max_slots=spec.M)
    ok = out["exactly_once"]
    pt = B.BenchPoint(spec.name, spec.p, 8, spec.rounds, out["virtual_s"] / spec.rounds,
                      max(out["exchange_ops_per_rank"] + out["counting_ops_per_rank"]),
                      {"delivered": out["delivered"], "ok": ok, "k": spec.k})
    return [B.BenchResult(spec.name, [pt], B._cfg(fabric.config))], ok


def _selftest(spec: RunSpec) -> tuple[list[B.BenchResult], list[str]]:
    from . import sync as S
    from .verify import run_lock_workload

    problems: list[str] = []
    lock_fn = _faulty_lock if spec.inject_fault else S.lock
    rows = []
    for seed in range(spec.seed, spec.seed + spec.seeds):
        try:
            res = run_lock_workload(min(spec.p, 8), seed, 200, lock_fn=lock_fn, max_steps=1_000_000)
            if any(res.final_words):
                problems.append(f"seed {seed}: lock words not released {res.final_words}")
            rows.append(B.BenchPoint("selftest_locks", min(spec.p, 8), 0, res.ops, res.virtual_time, res.grants))
        except WindlassError as exc:
            problems.append(f"seed {seed}: {type(exc).__name__}: {exc}")
    return [B.BenchResult("selftest", rows, {})], problems


def _faulty_lock(win, target, lock_type="exclusive"):
    """Test fixture: grants exclusive locks without checking the lock words."""
    from . import sync as S

    if str(getattr(lock_type, "value", lock_type)) != "exclusive":
        return S.lock(win, target, lock_type)
    ldesc, loff = win.sync_loc(target, S.LOCAL_LOCK)
    win.fabric.fadd64(win.rank, ldesc, loff, 0)
    win.sync.locks[target] = "exclusive"
    win.sync.exclusive_held += 1
    mon = win.fabric.ghost.get("lock_monitor")
    if mon is not None:
        mon.acquired(win.rank, target, "exclusive")


def run(spec: RunSpec) -> int:
    try:
        if spec.command == "bench":
            _emit(spec, _run_bench(spec))
            return 0
        if spec.command == "app":
            results, ok = _run_app(spec)
            _emit(spec, results)
            if not ok:
                print(f"windlass: {spec.name} violated its delivery invariant", file=sys.stderr)
            return 0 if ok else 1
        results, problems = _selftest(spec)
        _emit(spec, results)
        for msg in problems:
            print(f"windlass selftest: {msg}", file=sys.stderr)
        return 1 if problems else 0
    except (WindlassError, ValueError) as exc:
        print(f"windlass: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main(argv: Sequence[str] | None = None) -> int:
    spec = parse_args(argv)
    return run(spec)


if __name__ == "__main__":
    sys.exit(main())
