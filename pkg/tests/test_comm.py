import itertools

import numpy as np
import pytest

from windlass import comm, sync
from windlass.collectives import CollectiveContext
from windlass.comm import AccOp
from windlass.datatype import FLOAT64, INT64, Contig, Vector
from windlass.errors import EpochViolation, TypeMismatch, UnsupportedType
from windlass.fabric import Fabric, FabricConfig
from windlass.verify import HistoryOp, explore, linearizable
from windlass.window import WindowConfig, win_allocate

from conftest import allocated, make_fabric


def _locked(f, wins, rank, fn):
    """Run ``fn`` inside lock_all; count only the operations ``fn`` issues."""
    def body(r):
        w = wins[rank]
        sync.lock_all(w)
        c0 = f.counters(rank).copy()
        out = fn(w)
        f.gsync(rank)
        d = f.counters(rank) - c0
        sync.unlock_all(w)
        return out, d

    return f.run(body, [rank])[0]


@pytest.fixture
def two():
    f = make_fabric(2)
    return f, allocated(f, 256, 8)


def test_contiguous_put_one_op(two):
    f, wins = two
    _, d = _locked(f, wins, 0, lambda w: comm.put(w, 1, np.array([7], np.int64)))
    assert d.puts_issued == 1 and d.bytes_put == 8


def test_vector_put_three_blocks(two):
    f, wins = two
    src = np.arange(12, dtype=np.float64)
    _, d = _locked(f, wins, 0, lambda w: comm.put(w, 1, src, Vector(3, 2, 4, FLOAT64), 1,
                                                  target_dt=Contig(6, FLOAT64)))
    assert (d.puts_issued, d.bytes_put) == (3, 48)
    assert wins[1].array(np.float64)[:6].tolist() == [0, 1, 4, 5, 8, 9]


def test_get_after_put_with_flush(two):
    f, wins = two

    def fn(w):
        comm.put(w, 1, np.array([3, 1, 4], np.int64), target_disp=5)
        sync.flush(w, 1)
        out = np.zeros(3, np.int64)
        comm.get(w, 1, out, target_disp=5)
        sync.flush(w, 1)
        return out.tolist()

    assert _locked(f, wins, 0, fn)[0] == [3, 1, 4]


def test_epoch_required(two):
    f, wins = two
    with pytest.raises(EpochViolation):
        comm.put(wins[0], 1, np.zeros(1, np.int64))


def test_type_mismatch(two):
    f, wins = two
    with pytest.raises(TypeMismatch):
        _locked(f, wins, 0, lambda w: comm.put(w, 1, np.zeros(2, np.int64), INT64, 2, target_dt=FLOAT64))


def test_accumulate_accelerated_single_atomic(two):
    f, wins = two
    _, d = _locked(f, wins, 0, lambda w: comm.accumulate(w, 1, np.array([1], np.int64)))
    assert (d.atomics_issued, d.puts_issued, d.gets_issued) == (1, 0, 0)


def test_accumulate_min_fallback_counters(two):
    f, wins = two
    wins[1].array(np.int64)[0] = 50
    _, d = _locked(f, wins, 0, lambda w: comm.accumulate(w, 1, np.array([10], np.int64), op=AccOp.MIN))
    assert wins[1].array(np.int64)[0] == 10
    assert d.atomics_issued >= 2  # lock CAS + write-back CAS
    assert d.gets_issued == 1
    assert d.puts_issued >= 1  # release


def test_accumulate_float_and_ops(two):
    f, wins = two
    wins[1].array(np.float64)[:3] = [1.5, 2.0, -1.0]

    def fn(w):
        comm.accumulate(w, 1, np.array([0.25, 0.5, 2.0]), op=AccOp.SUM)
        comm.accumulate(w, 1, np.array([1.0, 9.0, -5.0]), op=AccOp.MAX)

    _locked(f, wins, 0, fn)
    assert wins[1].array(np.float64)[:3].tolist() == [1.75, 9.0, 1.0]
    with pytest.raises(UnsupportedType):
        _locked(f, wins, 0, lambda w: comm.accumulate(w, 1, np.array([1.0]), op=AccOp.BXOR))


def test_no_op_only_for_fetching(two):
    f, wins = two
    with pytest.raises(ValueError):
        _locked(f, wins, 0, lambda w: comm.accumulate(w, 1, np.array([1], np.int64), op=AccOp.NO_OP))


def test_fetch_and_op_identity(two):
    f, wins = two
    wins[1].array(np.int64)[2] = 17
    got = _locked(f, wins, 0, lambda w: comm.fetch_and_op(w, 1, 0, 2))[0]
    assert got == 17 and wins[1].array(np.int64)[2] == 17
    got = _locked(f, wins, 0, lambda w: comm.fetch_and_op(w, 1, 0, 2, AccOp.NO_OP))[0]
    assert got == 17


def test_compare_and_swap_float(two):
    f, wins = two
    wins[1].array(np.float64)[0] = 2.5
    old = _locked(f, wins, 0, lambda w: comm.compare_and_swap(w, 1, 2.5, 7.0, dtype=FLOAT64))[0]
    assert old == 2.5 and wins[1].array(np.float64)[0] == 7.0


@pytest.mark.parametrize("max_accel", [64, 0])
def test_sum_conservation(max_accel):
    p, n = 8, 1000
    f = make_fabric(p)
    wins = allocated(f, 8, 8, WindowConfig(acc_accel_max_elems=max_accel))

    def body(r):
        w = wins[r]
        sync.lock_all(w)
        one = np.array([1], np.int64)
        for _ in range(n):
            comm.accumulate(w, 0, one)
        sync.unlock_all(w)

    f.run(body)
    assert wins[0].array(np.int64)[0] == p * n


def test_sum_conservation_mixed_paths():
    """Accelerated single-word SUMs race with fallback SUMs over a 65-word span."""
    p = 6
    f = make_fabric(p)
    wins = allocated(f, 8 * 65, 8)

    def body(r):
        w = wins[r]
        sync.lock_all(w)
        for i in range(100):
            if r % 2:
                comm.accumulate(w, 0, np.ones(65, np.int64))
            else:
                comm.accumulate(w, 0, np.array([1], np.int64))
        sync.unlock_all(w)

    f.run(body)
    mem = wins[0].array(np.int64)
    assert mem[0] == 100 * p and (mem[1:] == 100 * (p // 2)).all()


def _three_rank_setup(initial, config=None):
    def setup(sched):
        f = Fabric(FabricConfig(p=3, seed=0), scheduler=sched)
        wins = f.run(lambda r: win_allocate(CollectiveContext.world(f, r), 8, 8, config))
        f.run(lambda r: sync.lock_all(wins[r]))
        wins[0].array(np.int64)[0] = initial
        return f, {"wins": wins, "clock": itertools.count(), "hist": []}

    return setup


def test_cas_exactly_once_exhaustive():
    def body(st, r):
        return comm.compare_and_swap(st["wins"][r], 0, 0, r + 1)

    def check(st, out):
        winners = [r for r, old in enumerate(out) if old == 0]
        if len(winners) != 1:
            return f"winners {winners}"
        if st["wins"][0].array(np.int64)[0] != winners[0] + 1:
            return "memory disagrees with winner"

    res = explore(_three_rank_setup(0), body, [0, 1, 2], check, max_decisions=20)
    assert res.exhausted and res.truncated == 0 and not res.failures
    assert res.schedules >= 6


def test_get_accumulate_sum_linearizable():
    def body(st, r):
        t0 = next(st["clock"])
        out = np.zeros(1, np.int64)
        comm.get_accumulate(st["wins"][r], 0, np.array([r + 1], np.int64), out)
        st["hist"].append(HistoryOp(t0, next(st["clock"]), "sum", r + 1, int(out[0])))

    def check(st, out):
        if st["wins"][0].array(np.int64)[0] != 6:
            return "lost update"
        if not linearizable(st["hist"], 0, lambda s, op: (s + op.arg, s)):
            return "not linearizable"

    res = explore(_three_rank_setup(0), body, [0, 1, 2], check, max_decisions=20)
    assert res.exhausted and not res.failures


def test_linearizable_rejects_impossible_history():
    hist = [HistoryOp(0, 1, "sum", 1, 0), HistoryOp(2, 3, "sum", 1, 0)]
    assert not linearizable(hist, 0, lambda s, op: (s + op.arg, s))


def test_requests_equivalent_to_put(two):
    f, wins = two

    def fn(w):
        req = comm.rput(w, 1, np.array([11, 12], np.int64), target_disp=1)
        assert comm.request_test(w, req) is False
        comm.request_wait(w, req)
        assert comm.request_test(w, req) is True
        sync.flush(w, 1)

    _locked(f, wins, 0, fn)
    assert wins[1].array(np.int64)[1:3].tolist() == [11, 12]


def test_rputs_completed_out_of_order_match_mirror(two):
    f, wins = two
    rng = np.random.default_rng(4)
    mirror = np.zeros(32, np.int64)

    def fn(w):
        reqs = []
        for i in range(100):
            off = int(rng.integers(0, 30))
            vals = rng.integers(-99, 99, size=2)
            reqs.append((comm.rput(w, 1, vals.astype(np.int64), target_disp=off), off, vals))
        for j in rng.permutation(len(reqs)):
            req, off, vals = reqs[j]
            comm.request_wait(w, req)
            mirror[off:off + 2] = vals
        sync.flush(w, 1)

    _locked(f, wins, 0, fn)
    assert np.array_equal(wins[1].array(np.int64), mirror)


def test_raccumulate_and_rget_accumulate(two):
    f, wins = two

    def fn(w):
        comm.request_wait(w, comm.raccumulate(w, 1, np.array([5], np.int64)))
        out = np.zeros(1, np.int64)
        comm.request_wait(w, comm.rget_accumulate(w, 1, np.array([2], np.int64), out))
        return int(out[0])

    assert _locked(f, wins, 0, fn)[0] == 5
    assert wins[1].array(np.int64)[0] == 7
