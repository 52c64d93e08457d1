"""Execution engines for simulated ranks.

Two engines share one small interface (``run``, ``yield_point``,
``block``, ``notify``, ``spinner``):

* :class:`DeterministicScheduler` runs every rank in its own greenlet and
  interleaves them at fabric calls, picking the next runnable rank with a
  seeded RNG or with an external chooser (used by :class:`Explorer`).
  A rank that spins on memory blocks until some region it watches is
  written, so a schedule in which nothing can change is reported as a
  :class:`~windlass.errors.Deadlock` instead of hanging.
* :class:`ThreadScheduler` runs ranks as OS threads; spins sleep with
  exponential backoff.
"""

from __future__ import annotations

import random
import threading
import time
from typing import Any, Callable, Hashable, Iterable, Sequence

import greenlet

from .errors import Deadlock, Livelock


class ScheduleTruncated(Exception):
    """Raised inside an explored run once its decision budget is spent."""


class _Spinner:
    """Exponential backoff state for one wait loop."""

    __slots__ = ("sched", "attempt")

    def __init__(self, sched):
        self.sched = sched
        self.attempt = 0

    def wait(self, keys: Iterable[Hashable], seen: tuple | None = None) -> None:
        """Wait until one of ``keys`` may have changed.

        ``seen`` is what :meth:`DeterministicScheduler.observe` returned right
        after the caller last read the keys; a foreign write since then makes
        the wait return at once instead of missing the wakeup.
        """
        self.sched.block(keys, seen)
        self.attempt += 1

    def backoff(self, keys: Iterable[Hashable], seen: tuple | None = None) -> None:
        """Wait after a failed retry; adds jittered delay on top of ``wait``."""
        self.sched.block(keys, seen)
        self.sched.jitter(self.attempt)
        self.attempt += 1


class DeterministicScheduler:
    """Seeded cooperative scheduler over greenlets.

    ``chooser`` overrides the RNG: it receives the sorted list of runnable
    ranks and returns the one to run. It is only consulted when there is a
    real choice.
    """

    deterministic = True

    def __init__(
        self,
        seed: int = 0,
        chooser: Callable[[list[int]], int] | None = None,
        backoff_base: int = 1,
        backoff_factor: int = 2,
        backoff_cap: int = 1024,
        max_steps: int | None = None,
    ):
        self.max_steps = max_steps
        self._limit: int | None = None
        self.rng = random.Random(seed)
        self.chooser = chooser
        self.backoff_base = backoff_base
        self.backoff_factor = backoff_factor
        self.backoff_cap = backoff_cap
        self.current: int | None = None
        self.progress: Callable[[], bool] | None = None
        self.progress_prob = 0.0
        self.has_pending: Callable[[], bool] = lambda: False
        self.steps = 0
        self._running = False
        self._runnable: list[int] = []
        self._blocked: dict[int, tuple] = {}
        self._waiters: dict[Hashable, set[int]] = {}
        self._resumed: set[int] = set()
        self._versions: dict[Hashable, int] = {}
        self._own: dict[tuple, int] = {}
        self._main: greenlet.greenlet | None = None
        self._fresh = False

    # -- rank side ---------------------------------------------------------

    def yield_point(self) -> None:
        if not self._running:
            return
        self.steps += 1
        if self._limit is not None and self.steps > self._limit:
            raise Livelock(f"run exceeded {self.max_steps} scheduling steps")
        if self._fresh:
            # just resumed by the driver: that choice already covers this op
            self._fresh = False
            return
        if self.progress_prob and self.rng.random() < self.progress_prob:
            self.progress()
        if len(self._runnable) < 2:
            return
        nxt = self._pick()
        if nxt != self.current:
            self._main.switch(nxt)

    def observe(self, keys: Iterable[Hashable]) -> tuple:
        """Per-key count of writes by ranks other than the current one."""
        me = self.current
        return tuple(self._versions.get(k, 0) - self._own.get((me, k), 0) for k in keys)

    def block(self, keys: Iterable[Hashable], seen: tuple | None = None) -> None:
        if not self._running:
            raise Deadlock("blocking wait outside of a scheduled run")
        me = self.current
        keys = tuple(keys)
        if seen is not None and self.observe(keys) != tuple(seen):
            return
        self._blocked[me] = keys
        for k in keys:
            self._waiters.setdefault(k, set()).add(me)
        self._remove_runnable(me)
        self._main.switch(None)

    def notify(self, key: Hashable, writer: int | None = None) -> None:
        self._versions[key] = self._versions.get(key, 0) + 1
        if writer is not None:
            self._own[(writer, key)] = self._own.get((writer, key), 0) + 1
        waiters = self._waiters.pop(key, None)
        if not waiters:
            return
        for r in sorted(waiters):
            keys = self._blocked.pop(r, None)
            if keys is None:
                continue
            for k in keys:
                if k != key:
                    s = self._waiters.get(k)
                    if s is not None:
                        s.discard(r)
            self._runnable.append(r)
            self._resumed.add(r)

    def jitter(self, attempt: int) -> None:
        if self.chooser is not None:
            return
        delay = min(self.backoff_cap, self.backoff_base * self.backoff_factor ** min(attempt, 30))
        for _ in range(self.rng.randrange(delay)):
            self.yield_point()

    def spinner(self) -> _Spinner:
        return _Spinner(self)

    # -- driver side -------------------------------------------------------

    def _pick(self) -> int:
        if self.chooser is None:
            return self._runnable[self.rng.randrange(len(self._runnable))]
        return self.chooser(sorted(self._runnable))

    def _remove_runnable(self, r: int) -> None:
        rl = self._runnable
        i = rl.index(r)
        rl[i] = rl[-1]
        rl.pop()

    def run(self, fns: Sequence[Callable[[], Any]], ranks: Sequence[int] | None = None) -> list:
        """Run ``fns[i]`` as rank ``ranks[i]`` until all return; results in order."""
        if self._running:
            raise RuntimeError("scheduler is already running")
        ranks = list(range(len(fns))) if ranks is None else list(ranks)
        self._main = greenlet.getcurrent()
        glets = {r: greenlet.greenlet(fn) for r, fn in zip(ranks, fns)}
        results: dict[int, Any] = {}
        self._runnable = list(ranks)
        self._blocked = {}
        self._waiters = {}
        self._resumed = set()
        self._limit = None if self.max_steps is None else self.steps + self.max_steps
        self._running = True
        nxt: int | None = None
        try:
            while glets:
                if nxt is None or nxt not in glets or nxt in self._blocked:
                    if not self._runnable:
                        if self.has_pending() and self.progress():
                            continue
                        raise Deadlock(f"ranks {sorted(self._blocked)} blocked forever")
                    nxt = self._pick() if len(self._runnable) > 1 else self._runnable[0]
                g = glets[nxt]
                self.current = nxt
                self._fresh = not g or nxt in self._resumed
                self._resumed.discard(nxt)
                out = g.switch()
                if g.dead:
                    results[nxt] = out
                    del glets[nxt]
                    self._remove_runnable(nxt)
                    nxt = None
                else:
                    nxt = out
        finally:
            self._running = False
            self.current = None
        return [results[r] for r in ranks]


class ThreadScheduler:
    """Preemptive engine: one OS thread per rank."""

    deterministic = False

    def __init__(self, seed: int = 0, backoff_cap_s: float = 1e-3, timeout_s: float = 120.0):
        self.seed = seed
        self.backoff_cap_s = backoff_cap_s
        self.timeout_s = timeout_s
        self.progress = None
        self.progress_prob = 0.0
        self.has_pending = lambda: False
        self._local = threading.local()
        self.steps = 0

    @property
    def current(self):
        return getattr(self._local, "rank", None)

    def yield_point(self) -> None:
        pass

    def notify(self, key, writer=None) -> None:
        pass

    def observe(self, keys) -> tuple:
        return ()

    def block(self, keys, seen=None) -> None:
        time.sleep(0)

    def jitter(self, attempt: int) -> None:
        pass

    def spinner(self) -> "_ThreadSpinner":
        return _ThreadSpinner(self)

    def run(self, fns, ranks=None) -> list:
        ranks = list(range(len(fns))) if ranks is None else list(ranks)
        results: dict[int, Any] = {}
        errors: list[BaseException] = []

        def body(r, fn):
            self._local.rank = r
            try:
                results[r] = fn()
            except BaseException as exc:  # re-raised in the driver
                errors.append(exc)

        threads = [threading.Thread(target=body, args=(r, fn), daemon=True) for r, fn in zip(ranks, fns)]
        for t in threads:
            t.start()
        deadline = time.monotonic() + self.timeout_s
        for t in threads:
            t.join(max(0.0, deadline - time.monotonic()))
            if errors:
                break
        if errors:
            raise errors[0]
        if any(t.is_alive() for t in threads):
            raise Deadlock(f"threads still running after {self.timeout_s}s")
        return [results[r] for r in ranks]


class _ThreadSpinner:
    __slots__ = ("sched", "attempt", "rng", "start")

    def __init__(self, sched: ThreadScheduler):
        self.sched = sched
        self.attempt = 0
        self.rng = random.Random(sched.seed ^ threading.get_ident())
        self.start = time.monotonic()

    def _sleep(self):
        if time.monotonic() - self.start > self.sched.timeout_s:
            raise Deadlock("spin wait exceeded timeout")
        base = 1e-6 * (2 ** min(self.attempt, 20))
        time.sleep(min(self.sched.backoff_cap_s, base) * self.rng.random())
        self.attempt += 1

    def wait(self, keys, seen=None) -> None:
        self._sleep()

    def backoff(self, keys, seen=None) -> None:
        self._sleep()


class _ReplayChooser:
    def __init__(self, prefix: list[int], max_decisions: int | None):
        self.prefix = prefix
        self.trace: list[tuple[int, int]] = []
        self.max_decisions = max_decisions

    def __call__(self, options: list[int]) -> int:
        i = len(self.trace)
        if self.max_decisions is not None and i >= self.max_decisions:
            raise ScheduleTruncated(i)
        c = self.prefix[i] if i < len(self.prefix) else 0
        self.trace.append((c, len(options)))
        return options[c]


class Explorer:
    """Depth-first enumeration of every scheduling decision sequence.

    Each iteration yields a chooser for a fresh :class:`DeterministicScheduler`;
    the caller rebuilds its system, runs it with that chooser and moves on.
    Runs that exceed ``max_decisions`` raise :class:`ScheduleTruncated` from
    inside the chooser; the caller should catch it and call :meth:`truncated`.
    """

    def __init__(self, max_schedules: int | None = None, max_decisions: int | None = None):
        self.max_schedules = max_schedules
        self.max_decisions = max_decisions
        self.explored = 0
        self.truncated_runs = 0
        self.exhausted = False

    def truncated(self) -> None:
        self.truncated_runs += 1

    def __iter__(self):
        prefix: list[int] = []
        while True:
            chooser = _ReplayChooser(prefix, self.max_decisions)
            yield chooser
            self.explored += 1
            trace = chooser.trace
            while trace and trace[-1][0] + 1 >= trace[-1][1]:
                trace.pop()
            if not trace:
                self.exhausted = True
                return
            if self.max_schedules is not None and self.explored >= self.max_schedules:
                return
            prefix = [c for c, _ in trace[:-1]] + [trace[-1][0] + 1]
