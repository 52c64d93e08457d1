"""Ghost-state checkers used by the test suite and ``windlass selftest``.

* :class:`LockMonitor` tracks who holds which lock as the sync layer
  reports acquisitions and releases, and raises on any overlap the lock
  protocol must exclude.
* :func:`linearizable` brute-forces a sequential witness for a small
  history of read-modify-write operations on one word.
* :func:`run_lock_workload` drives random lock traffic on a fresh fabric.
* :func:`run_dynamic_trials` races attach/detach against remote resolves
  and flags any descriptor for a region whose detach had already finished.
"""

from __future__ import annotations

import itertools
import random
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .collectives import CollectiveContext
from .errors import AddressNotAttached, SafetyViolation
from .fabric import Fabric, FabricConfig
from .scheduler import DeterministicScheduler, Explorer, ScheduleTruncated
from . import sync as S
from .window import (
    GLOBAL_LOCK,
    LOCAL_LOCK,
    Window,
    WindowConfig,
    resolve_dynamic,
    win_allocate,
    win_attach,
    win_create_dynamic,
    win_detach,
)


class LockMonitor:
    """Global view of granted locks; raises :class:`SafetyViolation` on conflict."""

    def __init__(self):
        self.exclusive: dict[int, int] = {}
        self.shared: Counter = Counter()
        self.all_holders: set[int] = set()
        self.grants = 0
        self._mu = threading.Lock()  # PREEMPTIVE runs call in from many threads

    def acquired(self, rank: int, target: int | None, kind: str) -> None:
        with self._mu:
            self._acquired(rank, target, kind)

    def released(self, rank: int, target: int | None, kind: str) -> None:
        with self._mu:
            self._released(rank, target, kind)

    def _acquired(self, rank: int, target: int | None, kind: str) -> None:
        self.grants += 1
        if kind == "all":
            if self.exclusive:
                raise SafetyViolation(f"rank {rank} got lock_all while {self.exclusive} held exclusive")
            self.all_holders.add(rank)
        elif kind == "exclusive":
            if target in self.exclusive or self.shared[target] or self.all_holders:
                raise SafetyViolation(
                    f"rank {rank} got exclusive({target}) against excl={self.exclusive.get(target)}, "
                    f"shared={self.shared[target]}, lock_all={sorted(self.all_holders)}")
            self.exclusive[target] = rank
        else:
            if target in self.exclusive:
                raise SafetyViolation(f"rank {rank} got shared({target}) while "
                                      f"rank {self.exclusive[target]} holds it exclusive")
            self.shared[target] += 1

    def _released(self, rank: int, target: int | None, kind: str) -> None:
        if kind == "all":
            self.all_holders.discard(rank)
        elif kind == "exclusive":
            if self.exclusive.get(target) == rank:
                del self.exclusive[target]
        else:
            self.shared[target] -= 1

    @property
    def idle(self) -> bool:
        return not self.exclusive and not +self.shared and not self.all_holders


def lock_words(fabric: Fabric, wins: Sequence[Window]) -> list[int]:
    """Every local lock word plus the global word, read directly."""
    out = []
    for w in wins:
        seg = fabric.segment(w.sync_loc(w.me, 0)[0])
        _, off = w.sync_loc(w.me, LOCAL_LOCK)
        out.append(int(np.frombuffer(seg.mem, dtype=np.int64)[off // 8]))
    w0 = wins[0]
    seg = fabric.segment(w0.sync_loc(0, 0)[0])
    _, off = w0.sync_loc(0, GLOBAL_LOCK)
    out.append(int(np.frombuffer(seg.mem, dtype=np.int64)[off // 8]))
    return out


# -- random lock workloads ------------------------------------------------------


@dataclass
class LockWorkloadResult:
    seed: int
    ops: int
    grants: int
    final_words: list[int]
    virtual_time: float


def random_lock_ops(rng: random.Random, n: int, p: int, nops: int) -> list[tuple]:
    """A random well-formed sequence of ``nops`` lock calls for one rank.

    Targets are acquired in increasing order so that correct code cannot
    deadlock on a cycle of nested locks.
    """
    ops: list[tuple] = []
    held: dict[int, str] = {}
    all_held = False

    def pending():
        return len(held) + all_held

    while len(ops) + pending() < nops:
        if all_held:
            ops.append(("unlock_all",))
            all_held = False
            continue
        can_open = len(ops) + pending() + 2 <= nops
        higher = [t for t in range(n) if t > max(held, default=-1)]
        r = rng.random()
        if held and (r < 0.45 or not can_open or not higher):
            t = rng.choice(sorted(held))
            ops.append(("unlock", t))
            del held[t]
        elif not held and r < 0.6:
            ops.append(("lock_all",))
            all_held = True
        else:
            t = rng.choice(higher)
            kind = "exclusive" if rng.random() < 0.5 else "shared"
            ops.append(("lock", t, kind))
            held[t] = kind
    for t in sorted(held):
        ops.append(("unlock", t))
    if all_held:
        ops.append(("unlock_all",))
    return ops


def _apply(win: Window, op: tuple, lock_fn, unlock_fn) -> None:
    if op[0] == "lock":
        lock_fn(win, op[1], op[2])
    elif op[0] == "unlock":
        unlock_fn(win, op[1])
    elif op[0] == "lock_all":
        S.lock_all(win)
    else:
        S.unlock_all(win)


def setup_lock_system(p: int, seed: int, scheduler=None,
                      max_steps: int | None = None) -> tuple[Fabric, list[Window], LockMonitor]:
    fabric = Fabric(FabricConfig(p=p, seed=seed, max_steps=max_steps), scheduler=scheduler)
    wins = fabric.run(lambda r: win_allocate(CollectiveContext.world(fabric, r), 64, 8,
                                             WindowConfig(k_max=2)))
    mon = LockMonitor()
    fabric.ghost["lock_monitor"] = mon
    return fabric, wins, mon


def run_lock_workload(p: int = 8, seed: int = 0, nops: int = 1000,
                      lock_fn: Callable = S.lock, unlock_fn: Callable = S.unlock,
                      max_steps: int | None = None) -> LockWorkloadResult:
    """Random lock/unlock/lock_all traffic from every rank, checked by the monitor."""
    fabric, wins, mon = setup_lock_system(p, seed, max_steps=max_steps)
    plans = [random_lock_ops(random.Random(f"{seed}:{r}"), p, p, nops) for r in range(p)]

    def body(r):
        for op in plans[r]:
            _apply(wins[r], op, lock_fn, unlock_fn)

    fabric.run(body)
    return LockWorkloadResult(seed, sum(map(len, plans)), mon.grants, lock_words(fabric, wins),
                              max(fabric.clock_now(r) for r in range(p)))


@dataclass
class ExploreResult:
    scenarios: int = 0
    schedules: int = 0
    truncated: int = 0
    exhausted: bool = True
    failures: list = field(default_factory=list)


def explore_lock_scenario(plans: Sequence[Sequence[tuple]], max_decisions: int = 40,
                          max_schedules: int | None = None,
                          lock_fn: Callable = S.lock, unlock_fn: Callable = S.unlock) -> ExploreResult:
    """Run ``plans`` (one op list per rank) under every schedule the explorer finds."""
    p = len(plans)
    sched = DeterministicScheduler(0)
    exp = Explorer(max_schedules=max_schedules, max_decisions=max_decisions)
    res = ExploreResult(scenarios=1)
    fabric = wins = mon = None
    for chooser in exp:
        if fabric is None:
            sched.chooser = None
            fabric, wins, mon = setup_lock_system(p, 0, scheduler=sched)
        sched.chooser = chooser

        def body(r):
            for op in plans[r]:
                _apply(wins[r], op, lock_fn, unlock_fn)

        try:
            fabric.run(body)
        except ScheduleTruncated:
            exp.truncated()
            fabric = None
            continue
        except SafetyViolation as exc:
            res.failures.append((list(chooser.trace), str(exc)))
            fabric = None
            continue
        words = lock_words(fabric, wins)
        if any(words) or not mon.idle:
            res.failures.append((list(chooser.trace), f"lock words not released: {words}"))
            fabric = None
    res.schedules = exp.explored
    res.truncated = exp.truncated_runs
    res.exhausted = exp.exhausted
    return res


def explore(setup: Callable[[DeterministicScheduler], tuple[Fabric, object]],
            body: Callable[[object, int], object], ranks: Sequence[int],
            check: Callable[[object, list], str | None] | None = None,
            max_decisions: int = 40, max_schedules: int | None = None) -> ExploreResult:
    """Generic bounded-exhaustive exploration.

    ``setup(sched)`` builds a fresh ``(fabric, state)`` on ``sched`` (it runs
    without a chooser), ``body(state, rank)`` is the explored program and
    ``check(state, results)`` returns a failure message or None.
    """
    sched = DeterministicScheduler(0)
    exp = Explorer(max_schedules=max_schedules, max_decisions=max_decisions)
    res = ExploreResult(scenarios=1)
    for chooser in exp:
        sched.chooser = None
        fabric, state = setup(sched)
        sched.chooser = chooser
        try:
            out = fabric.run(lambda r: body(state, r), ranks)
        except ScheduleTruncated:
            exp.truncated()
            continue
        except SafetyViolation as exc:
            res.failures.append((list(chooser.trace), str(exc)))
            continue
        msg = check(state, out) if check is not None else None
        if msg:
            res.failures.append((list(chooser.trace), msg))
    res.schedules = exp.explored
    res.truncated = exp.truncated_runs
    res.exhausted = exp.exhausted
    return res


# -- linearizability ---------------------------------------------------------------


@dataclass(frozen=True)
class HistoryOp:
    """One completed operation: ``fn(state, arg) -> (new_state, result)``."""

    invoked: int
    returned: int
    name: str
    arg: object
    result: object


def linearizable(history: Sequence[HistoryOp], initial, step: Callable) -> bool:
    """True when some total order respecting real time explains every result.

    ``step(state, op) -> (state, expected_result)``. Brute force; meant for
    histories of at most a handful of operations.
    """
    ops = list(history)
    n = len(ops)
    before = [[a.returned < b.invoked for b in ops] for a in ops]
    for perm in itertools.permutations(range(n)):
        pos = {i: k for k, i in enumerate(perm)}
        if any(before[b][a] and pos[a] < pos[b] for a in range(n) for b in range(n)):
            continue
        state = initial
        ok = True
        for i in perm:
            state, expect = step(state, ops[i])
            if expect != ops[i].result:
                ok = False
                break
        if ok:
            return True
    return False


# -- dynamic windows -----------------------------------------------------------------


@dataclass
class DynamicTrialResult:
    trials: int = 0
    resolves: int = 0
    hits: int = 0
    misses: int = 0
    distinct_logs: int = 0
    stale: list = field(default_factory=list)


def run_dynamic_trials(trials: int, seed: int = 0, notify: bool = False, p: int = 3,
                       ops: int = 4, per_fabric: int = 100,
                       resolve: Callable = resolve_dynamic) -> DynamicTrialResult:
    """Race one owner's attach/detach against the other ranks' resolves.

    Every trial is one scheduled run with its own interleaving. The owner
    (rank 0) attaches and detaches random regions; every other rank resolves
    random addresses from regions that were ever attached. A resolve is
    stale when it returns the key of a region whose detach completed before
    the resolve began. The event log is exact because the scheduler only
    switches ranks at fabric operations.
    """
    res = DynamicTrialResult()
    logs: set = set()
    fabric = wins = None
    for t in range(trials):
        if t % per_fabric == 0:
            fabric = Fabric(FabricConfig(p=p, seed=seed * 1_000_003 + t))
            cfg = WindowConfig(dynamic_notify=notify, max_dynamic_regions=4 * ops + 4)
            wins = fabric.run(lambda r: win_create_dynamic(CollectiveContext.world(fabric, r), cfg))
            live: dict[int, tuple] = {}
            ever: list[tuple] = []
            detached: set[int] = set()
        rng = random.Random(f"{seed}:{t}")
        log: list[tuple] = []
        owner_plan = [rng.random() < 0.5 for _ in range(ops)]
        picks = [[(rng.random(), rng.random()) for _ in range(ops)] for _ in range(p)]
        if not ever:
            seg = win_attach(wins[0], 64)
            key = wins[0]._attached[seg.address][1].key
            live[seg.address] = (seg, key)
            ever.append((seg.address, key))

        def owner():
            for detach in owner_plan:
                if live and (detach or len(live) >= 2 * ops):
                    addr = rng.choice(sorted(live))
                    _, key = live.pop(addr)
                    win_detach(wins[0], addr)
                    detached.add(key)
                    log.append(("detach", key))
                else:
                    seg = win_attach(wins[0], rng.choice([8, 64, 256]))
                    key = wins[0]._attached[seg.address][1].key
                    live[seg.address] = (seg, key)
                    ever.append((seg.address, key))
                    log.append(("attach", key))
                fabric.sched.yield_point()

        def reader(r):
            out = []
            for u, v in picks[r]:
                # mostly live regions, sometimes ones that may be gone
                pool = sorted(live) if live and u < 0.7 else [a for a, _ in ever]
                addr = pool[int(v * len(pool))]
                gone = frozenset(detached)
                log.append(("begin", r))
                try:
                    desc, _ = resolve(wins[r], 0, addr, 8)
                except AddressNotAttached:
                    log.append(("miss", r))
                    out.append(None)
                    continue
                log.append(("hit", r, desc.key))
                out.append((desc.key, gone))
            return out

        got = fabric.run(lambda r: owner() if r == 0 else reader(r))
        res.trials += 1
        logs.add(tuple(log))
        for r in range(1, p):
            for item in got[r]:
                res.resolves += 1
                if item is None:
                    res.misses += 1
                    continue
                res.hits += 1
                key, gone = item
                if key in gone:
                    res.stale.append((t, r, key))
    res.distinct_logs = len(logs)
    return res
