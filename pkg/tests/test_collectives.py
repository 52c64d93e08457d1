import math

import numpy as np
import pytest

from windlass.collectives import CollectiveContext, ReduceOp
from windlass.errors import ProtocolError

from conftest import make_fabric, world


def _ops_delta(f, fn):
    before = f.counters_snapshot()
    out = f.run(fn)
    after = f.counters_snapshot()
    return out, [after[r].remote_ops - before[r].remote_ops for r in range(f.p)]


def test_barrier_single_rank_is_free():
    f = make_fabric(1)
    _, ops = _ops_delta(f, lambda r: world(f, r).barrier())
    assert ops == [0]


@pytest.mark.parametrize("n", [2, 4, 8, 16, 32])
def test_barrier_atomics_per_rank(n):
    f = make_fabric(n)
    f.run(lambda r: world(f, r))
    before = f.counters_snapshot()
    f.run(lambda r: world(f, r).barrier())
    for r in range(n):
        d = f.counters(r) - before[r]
        assert d.atomics_issued == math.ceil(math.log2(n))
        assert d.puts_issued == d.gets_issued == 0


def test_barrier_n6_time():
    f = make_fabric(6)
    f.run(lambda r: world(f, r))
    t0 = f.sync_clocks()
    f.run(lambda r: world(f, r).barrier())
    assert max(f.clock_ps(r) for r in range(6)) - t0 == 3 * round(2.4e-6 * 1e12)


def test_barrier_separation():
    """Writes gsync'd before the barrier are visible to everyone after it."""
    n = 8
    f = make_fabric(n)
    descs = [f.register(r, 8 * n) for r in range(n)]
    bad = []

    def body(r):
        for t in range(n):
            f.put(r, descs[t], 8 * r, np.array([r + 1], dtype=np.int64))
        f.gsync(r)
        world(f, r).barrier()
        mine = f.local_view(r, descs[r], np.int64)
        if list(mine) != list(range(1, n + 1)):
            bad.append(r)

    f.run(body)
    assert not bad


def test_allgather_rank_ids():
    f = make_fabric(5)
    out = f.run(lambda r: world(f, r).allgather_ints([r]))
    for o in out:
        assert o[:, 0].tolist() == [0, 1, 2, 3, 4]


@pytest.mark.parametrize("n", [1, 3, 7, 12])
def test_allgather_variable_payload(n):
    f = make_fabric(n)
    out = f.run(lambda r: world(f, r).allgather(bytes([r]) * 13))
    expect = [bytes([i]) * 13 for i in range(n)]
    assert all(o == expect for o in out)


def test_allreduce_sum_and_and():
    f = make_fabric(16)
    sums = f.run(lambda r: world(f, r).allreduce(r, ReduceOp.SUM))
    assert sums == [120] * 16
    ands = f.run(lambda r: world(f, r).allreduce(True, ReduceOp.AND))
    assert ands == [True] * 16
    mixed = f.run(lambda r: world(f, r).allreduce(r != 3, ReduceOp.AND))
    assert mixed == [False] * 16


def test_allreduce_arrays_match_numpy():
    n = 6
    f = make_fabric(n)
    rng = np.random.default_rng(3)
    data = rng.integers(-100, 100, size=(n, 5))
    out = f.run(lambda r: world(f, r).allreduce(data[r], ReduceOp.MAX))
    for o in out:
        assert np.array_equal(o, data.max(axis=0))


@pytest.mark.parametrize("root", [0, 2, 4])
def test_broadcast(root):
    f = make_fabric(5)
    payload = b"windlass" * 20
    out = f.run(lambda r: world(f, r).broadcast(root, payload if r == root else None, len(payload)))
    assert out == [payload] * 5


def test_collectives_reusable_many_times():
    f = make_fabric(4)

    def body(r):
        ctx = world(f, r)
        return [ctx.allreduce(r * i, ReduceOp.SUM) for i in range(50)]

    out = f.run(body)
    assert out[0] == [6 * i for i in range(50)]


def test_allgather_ops_logarithmic():
    n = 16
    f = make_fabric(n)
    f.run(lambda r: world(f, r).allgather(b"12345678"))  # first call sizes scratch
    _, ops = _ops_delta(f, lambda r: world(f, r).allgather(b"abcdefgh"))
    # per round: one put plus one flag atomic
    assert ops == [2 * 4] * n


def test_mismatched_collectives_detected():
    f = make_fabric(2)

    def body(r):
        ctx = world(f, r)
        if r == 0:
            ctx.barrier()
        else:
            ctx.allgather(b"x")

    with pytest.raises(ProtocolError):
        f.run(body)


def test_split_by_node():
    f = make_fabric(6, ranks_per_node=3)
    out = f.run(lambda r: world(f, r).split_by_node().allgather_ints([r])[:, 0].tolist())
    assert out[:3] == [[0, 1, 2]] * 3
    assert out[3:] == [[3, 4, 5]] * 3


def test_subgroup():
    f = make_fabric(4)

    def body(r):
        sub = world(f, r).subgroup([1, 3])
        return None if sub is None else sub.allreduce(r, ReduceOp.SUM)

    assert f.run(body) == [None, 4, None, 4]
