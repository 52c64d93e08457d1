import random

import numpy as np
import pytest

from windlass import sync
from windlass.errors import Deadlock, Livelock
from windlass.fabric import Fabric, FabricConfig, Mode
from windlass.scheduler import DeterministicScheduler, Explorer, ScheduleTruncated
from windlass.verify import LockMonitor, _apply, lock_words, random_lock_ops

from conftest import allocated, make_fabric


def _trace(seed):
    f = make_fabric(4, seed=seed)
    d = f.register(0, 8)
    return f.run(lambda r: [f.fadd64(r, d, 0, 1) for _ in range(20)])


def test_same_seed_same_interleaving():
    assert _trace(3) == _trace(3)
    assert any(_trace(3) != _trace(s) for s in range(4, 8))


def test_deadlock_detected():
    f = make_fabric(2)
    d = f.register(0, 8)

    def body(r):
        while f.load64(0, d, 0) == 0:
            f.sched.spinner().wait((f.wait_key(d),))

    with pytest.raises(Deadlock):
        f.run(body, [0])


def test_spin_wakes_on_remote_write():
    f = make_fabric(2)
    d = f.register(0, 8)

    def body(r):
        if r == 1:
            f.fadd64(1, d, 0, 5)
            return None
        spin = f.sched.spinner()
        while f.load64(0, d, 0) == 0:
            spin.wait((f.wait_key(d),))
        return f.load64(0, d, 0)

    assert f.run(body)[0] == 5


def test_step_budget_turns_livelock_into_error():
    f = Fabric(FabricConfig(p=2, max_steps=500))
    d = f.register(0, 8)

    def body(r):
        while True:
            f.fadd64(r, d, 0, 1)

    with pytest.raises(Livelock):
        f.run(body)


def test_explorer_finds_lost_update():
    """Unsynchronized read-modify-write: some schedule loses an increment."""
    outcomes = set()
    for chooser in Explorer():
        sched = DeterministicScheduler(0, chooser=chooser)
        box = [0]

        def rmw():
            sched.yield_point()
            v = box[0]
            sched.yield_point()
            box[0] = v + 1

        sched.run([rmw, rmw])
        outcomes.add(box[0])
    assert outcomes == {1, 2}


def test_explorer_truncation():
    exp = Explorer(max_decisions=3)
    runs = 0
    for chooser in exp:
        sched = DeterministicScheduler(0, chooser=chooser)

        def spin():
            for _ in range(10):
                sched.yield_point()

        try:
            sched.run([spin, spin])
        except ScheduleTruncated:
            exp.truncated()
        runs += 1
    assert exp.exhausted and exp.truncated_runs == runs == 2 ** 3


def test_preemptive_lock_workload():
    f = Fabric(FabricConfig(p=4, mode=Mode.PREEMPTIVE))
    wins = allocated(f, 64, 8)
    mon = LockMonitor()
    f.ghost["lock_monitor"] = mon
    plans = [random_lock_ops(random.Random(r), 4, 4, 300) for r in range(4)]
    f.run(lambda r: [_apply(wins[r], op, sync.lock, sync.unlock) for op in plans[r]])
    assert not any(lock_words(f, wins)) and mon.idle
