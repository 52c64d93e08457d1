"""Microbenchmarks in virtual time and least-squares cost-model fits.

Every sample aligns all clocks, runs the measured step on every rank, and
records the maximum elapsed virtual time across ranks; a point reports the
median of its samples. In deterministic mode the result depends only on the
configuration and seed.

Output schema (CSV header and JSON keys, one record per point)::

    bench,p,size,sample_count,median_s,ops_remote

``ops_remote`` is the largest per-rank count of fabric operations issued
during one sample. Application rows append their own columns.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import comm, sync
from .collectives import CollectiveContext
from .errors import DegenerateFit, ModeMismatch
from .fabric import Fabric, FabricConfig, Mode
from .window import WindowConfig, win_allocate, win_free

COLUMNS = ("bench", "p", "size", "sample_count", "median_s", "ops_remote")


class Kind(str, enum.Enum):
    PUT = "put"
    GET = "get"
    FENCE = "fence"
    PSCW_RING = "pscw_ring"
    LOCK_UNLOCK = "lock_unlock"


class Regressor(str, enum.Enum):
    SIZE = "size"
    LOG_P = "log_p"
    K = "k"


@dataclass
class BenchPoint:
    bench: str
    p: int
    size: int
    sample_count: int
    median_s: float
    ops_remote: int
    extra: dict = field(default_factory=dict)

    def record(self) -> dict:
        rec = {c: getattr(self, c) for c in COLUMNS}
        rec.update(self.extra)
        return rec


@dataclass
class BenchResult:
    name: str
    points: list[BenchPoint]
    config: dict

    def series(self, x: str = "size") -> tuple[np.ndarray, np.ndarray]:
        xs = np.array([getattr(pt, x) if hasattr(pt, x) else pt.extra[x] for pt in self.points], dtype=float)
        ys = np.array([pt.median_s for pt in self.points], dtype=float)
        return xs, ys


@dataclass(frozen=True)
class FittedModel:
    intercept: float
    slope: float
    residual: float
    points: int


def _require_deterministic(config: FabricConfig) -> None:
    if config.mode is not Mode.DETERMINISTIC:
        raise ModeMismatch("benchmarks with model assertions need DETERMINISTIC mode")


def _measure(fabric: Fabric, step: Callable[[int, int], None], samples: int,
             ranks: Sequence[int] | None = None) -> tuple[float, int]:
    """Median over samples of the max-across-ranks elapsed time of ``step``.

    ``step(rank, sample)`` runs on every rank in ``ranks`` inside one
    scheduled run per sample.
    """
    ranks = list(range(fabric.p)) if ranks is None else list(ranks)
    times, ops = [], 0
    for s in range(samples):
        t0 = fabric.sync_clocks(ranks)
        before = fabric.counters_snapshot()
        fabric.run(lambda r: step(r, s), ranks)
        after = fabric.counters_snapshot()
        times.append(max(fabric.clock_ps(r) for r in ranks) - t0)
        ops = max(ops, max(after[r].remote_ops - before[r].remote_ops for r in ranks))
    return float(np.median(times)) / 1e12, ops


def _world(fabric: Fabric, k_max: int = 8):
    return fabric.run(lambda r: win_allocate(CollectiveContext.world(fabric, r), 1 << 16, 1,
                                             WindowConfig(k_max=k_max)))


def bench_latency(kind: Kind | str = Kind.PUT, p: int = 2, sizes: Iterable[int] = (8,), samples: int = 1000,
                  config: FabricConfig | None = None) -> BenchResult:
    """One put or get plus flush from rank 0 to rank 1 inside one exclusive lock."""
    kind = Kind(kind)
    config = replace(config or FabricConfig(), p=max(p, 2))
    _require_deterministic(config)
    sizes = list(sizes)
    if kind not in (Kind.PUT, Kind.GET):
        raise ValueError("latency bench covers put and get")
    fabric = Fabric(config)
    big = max(sizes, default=0)
    wins = fabric.run(lambda r: win_allocate(CollectiveContext.world(fabric, r), max(big, 8), 1))
    buf = np.zeros(max(big, 8), dtype=np.uint8)
    fabric.run(lambda r: sync.lock(wins[0], 1, "exclusive"), [0])
    points = []
    op = comm.put if kind is Kind.PUT else comm.get
    for size in sizes:
        def step(r, s, size=size):
            op(wins[0], 1, buf[:size], target_disp=0)
            sync.flush(wins[0], 1)

        med, ops = _measure(fabric, step, samples, [0])
        points.append(BenchPoint(f"latency_{kind.value}", fabric.p, size, samples, med, ops))
    fabric.run(lambda r: sync.unlock(wins[0], 1), [0])
    return BenchResult(f"latency_{kind.value}", points, _cfg(config))


def bench_message_rate(p: int = 2, batch: int = 1000, size: int = 8, intra: bool = False,
                       samples: int = 10, config: FabricConfig | None = None) -> BenchResult:
    """Per-operation issue overhead: ``batch`` puts without synchronization."""
    config = replace(config or FabricConfig(), p=max(p, 2), ranks_per_node=2 if intra else 1)
    _require_deterministic(config)
    fabric = Fabric(config)
    wins = fabric.run(lambda r: win_allocate(CollectiveContext.world(fabric, r), max(size, 8), 1))
    buf = np.zeros(max(size, 8), dtype=np.uint8)
    fabric.run(lambda r: sync.lock(wins[0], 1, "exclusive"), [0])
    times, ops = [], 0
    for _ in range(samples):
        fabric.run(lambda r: sync.flush(wins[0], 1), [0])
        t0 = fabric.clock_ps(0)
        c0 = fabric.counters(0).remote_ops

        def issue(r):
            for _ in range(batch):
                comm.put(wins[0], 1, buf[:size])

        fabric.run(issue, [0])
        times.append(fabric.clock_ps(0) - t0)
        ops = max(ops, fabric.counters(0).remote_ops - c0)
    fabric.run(lambda r: sync.unlock(wins[0], 1), [0])
    name = "msgrate_intra" if intra else "msgrate_inter"
    per_op = float(np.median(times)) / batch / 1e12
    pt = BenchPoint(name, fabric.p, size, samples, per_op, ops, {"batch": batch})
    return BenchResult(name, [pt], _cfg(config))


def _ring_groups(me: int, n: int, k: int) -> tuple[list[int], list[int]]:
    """Targets ``me+1..me+k`` and the origins that target ``me``."""
    targets = [(me + d) % n for d in range(1, k + 1)]
    origins = [(me - d) % n for d in range(1, k + 1)]
    return targets, origins


def bench_sync(kind: Kind | str, p_list: Iterable[int], samples: int = 1000, k: int = 2,
               config: FabricConfig | None = None) -> BenchResult:
    """Synchronization cost as a function of p.

    FENCE: one fence on every rank. PSCW_RING: post to ``k`` origins, start
    on ``k`` targets, complete, wait. LOCK_UNLOCK: rank 0 takes and releases
    an exclusive lock on rank 1 while everyone else idles.
    """
    kind = Kind(kind)
    base = config or FabricConfig()
    _require_deterministic(base)
    points = []
    for p in p_list:
        fabric = Fabric(replace(base, p=p))
        wins = _world(fabric, k_max=max(k, 1))
        per_phase: dict[str, int] = {}
        if kind is Kind.FENCE:
            def step(r, s):
                sync.fence(wins[r])
            ranks = None
        elif kind is Kind.PSCW_RING:
            if k >= p:
                raise ValueError(f"ring with k={k} needs p > k")

            def step(r, s):
                w = wins[r]
                targets, origins = _ring_groups(r, p, k)
                f = w.fabric
                c = f.counters(r)
                marks = [c.remote_ops]
                sync.post(w, origins)
                marks.append(c.remote_ops)
                sync.start(w, targets)
                marks.append(c.remote_ops)
                sync.complete(w)
                marks.append(c.remote_ops)
                sync.wait(w)
                marks.append(c.remote_ops)
                for name, a, b in zip(("post", "start", "complete", "wait"), marks, marks[1:]):
                    per_phase[name] = max(per_phase.get(name, 0), b - a)
            ranks = None
        elif kind is Kind.LOCK_UNLOCK:
            def step(r, s):
                sync.lock(wins[0], 1 % p, "exclusive")
                sync.unlock(wins[0], 1 % p)
            ranks = [0]
        else:
            raise ValueError(f"{kind} is not a synchronization bench")
        med, ops = _measure(fabric, step, samples, ranks)
        extra = {"k": k} if kind is Kind.PSCW_RING else {}
        extra.update({f"ops_{n}": v for n, v in sorted(per_phase.items())})
        extra["log2_p"] = math.ceil(math.log2(p)) if p > 1 else 0
        points.append(BenchPoint(kind.value, p, 0, samples, med, ops, extra))
        fabric.run(lambda r: win_free(wins[r]))
    return BenchResult(kind.value, points, _cfg(base))


def fit_model(result: BenchResult | tuple[Sequence[float], Sequence[float]],
              regressor: Regressor | str = Regressor.SIZE) -> FittedModel:
    """Ordinary least squares ``y = intercept + slope * x``.

    ``x`` is the size, ``ceil(log2 p)`` or ``k`` depending on ``regressor``.
    ``residual`` is the relative RMS of the residuals.
    """
    regressor = Regressor(regressor)
    if isinstance(result, BenchResult):
        key = {Regressor.SIZE: "size", Regressor.LOG_P: "log2_p", Regressor.K: "k"}[regressor]
        xs, ys = result.series(key)
    else:
        xs, ys = (np.asarray(a, dtype=float) for a in result)
    if xs.size < 6:
        raise DegenerateFit(f"need at least 6 points, got {xs.size}")
    if np.all(xs == xs[0]):
        raise DegenerateFit("all regressor values are equal")
    A = np.column_stack([np.ones_like(xs), xs])
    (b0, b1), *_ = np.linalg.lstsq(A, ys, rcond=None)
    res = ys - (b0 + b1 * xs)
    scale = float(np.sqrt(np.mean(ys ** 2))) or 1.0
    return FittedModel(float(b0), float(b1), float(np.sqrt(np.mean(res ** 2)) / scale), int(xs.size))


def r_squared(xs, ys) -> float:
    xs, ys = np.asarray(xs, float), np.asarray(ys, float)
    fit = fit_model((xs, ys))
    pred = fit.intercept + fit.slope * xs
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot if ss_tot else 1.0


# -- output ------------------------------------------------------------------


def _cfg(config: FabricConfig) -> dict:
    d = asdict(config)
    d["mode"] = config.mode.value
    return d


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def records(results: Iterable[BenchResult]) -> list[dict]:
    return [pt.record() for res in results for pt in res.points]


def to_csv(results: Iterable[BenchResult]) -> str:
    recs = records(results)
    extra = sorted({k for r in recs for k in r} - set(COLUMNS))
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(list(COLUMNS) + extra)
    for r in recs:
        w.writerow([_fmt(r.get(c, "")) for c in list(COLUMNS) + extra])
    return out.getvalue()


def to_json(results: Iterable[BenchResult]) -> str:
    return json.dumps(records(results), indent=2, sort_keys=True) + "\n"
