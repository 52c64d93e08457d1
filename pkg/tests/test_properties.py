"""Hypothesis checks of the core invariants."""

import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from windlass import cli, sync
from windlass.collectives import ReduceOp
from windlass.datatype import BYTE, FLOAT64, INT64, Contig, Indexed, Vector, decompose, gather_bytes
from windlass.verify import lock_words, run_lock_workload
from windlass.window import COMPLETION, M32, MATCH, WindowConfig

from conftest import allocated, make_fabric, world
from test_datatype import byte_map, oracle_blocks

FAST = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])


def _indexed(inner):
    pairs = st.lists(st.tuples(st.integers(0, 3), st.integers(1, 3)), min_size=1, max_size=4)

    def build(ps):
        offs, lens, pos = [], [], 0
        for gap, ln in ps:
            pos += gap
            offs.append(pos)
            lens.append(ln)
            pos += ln
        return Indexed(tuple(offs), tuple(lens), inner)

    return pairs.map(build)


def _derived(inner):
    return st.one_of(
        st.builds(Contig, st.integers(1, 4), st.just(inner)),
        st.tuples(st.integers(1, 4), st.integers(1, 3), st.integers(0, 3)).map(
            lambda t: Vector(t[0], t[1], t[1] + t[2], inner)),
        _indexed(inner),
    )


def datatypes(base):
    return st.recursive(st.just(base), lambda s: s.flatmap(_derived), max_leaves=3)


@st.composite
def type_pairs(draw):
    base = draw(st.sampled_from([INT64, FLOAT64, BYTE]))
    o, t = draw(datatypes(base)), draw(datatypes(base))
    g = math.gcd(o.size, t.size)
    return o, t.size // g, t, o.size // g


@FAST
@given(type_pairs())
def test_decomposition_complete_and_minimal(pair):
    o, oc, t, tc = pair
    blocks = decompose(o, oc, t, tc)
    # completeness: the blocks expand to exactly the byte-wise pairing
    pairs = [(b.origin_offset + i, b.target_offset + i) for b in blocks for i in range(b.length)]
    assert pairs == list(zip(byte_map(o, oc), byte_map(t, tc)))
    # minimality: no neighbour could be merged on both sides
    for a, b in zip(blocks, blocks[1:]):
        assert not (a.origin_offset + a.length == b.origin_offset
                    and a.target_offset + a.length == b.target_offset)
    assert blocks == oracle_blocks(o, oc, t, tc)


@FAST
@given(datatypes(BYTE), st.integers(1, 3))
def test_gather_bytes_follows_byte_map(dt, count):
    n = dt.extent * count
    buf = np.arange(n, dtype=np.uint64).astype(np.uint8)
    assert gather_bytes(buf, dt, count) == bytes(buf[byte_map(dt, count)])


@FAST
@given(st.integers(1, 8), st.integers(1, 30), st.integers(0, 2 ** 16))
def test_fadd_returns_permutation(p, n, seed):
    f = make_fabric(p, seed=seed)
    d = f.register(0, 8)
    out = f.run(lambda r: [f.fadd64(r, d, 0, 1) for _ in range(n)])
    assert sorted(v for vs in out for v in vs) == list(range(p * n))


@settings(max_examples=15, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2 ** 20))
def test_lock_words_return_to_zero(p, seed):
    res = run_lock_workload(p, seed, 60)
    assert res.grants > 0
    assert not any(res.final_words)


@st.composite
def exposure_plans(draw):
    p = draw(st.integers(2, 6))
    targets = [sorted(draw(st.sets(st.sampled_from([j for j in range(p) if j != r]), max_size=p - 1)))
               for r in range(p)]
    return p, targets, draw(st.integers(1, 3)), draw(st.integers(0, 999))


@FAST
@given(exposure_plans())
def test_pscw_counters_return_to_zero(plan):
    p, targets, reps, seed = plan
    origins = [[r for r in range(p) if j in targets[r]] for j in range(p)]
    k = max([len(t) for t in targets] + [len(o) for o in origins] + [1])
    f = make_fabric(p, seed=seed)
    wins = allocated(f, 8, 8, WindowConfig(k_max=k))

    def body(r):
        w = wins[r]
        for _ in range(reps):
            if origins[r]:
                sync.post(w, origins[r])
            if targets[r]:
                sync.start(w, targets[r])
                sync.complete(w)
            if origins[r]:
                sync.wait(w)

    f.run(body)
    for r in range(p):
        d, off = wins[r].sync_loc(r, COMPLETION)
        assert f.load64(r, d, off) == 0
        d, off = wins[r].sync_loc(r, MATCH)
        v = f.load64(r, d, off)
        # posts land in the ring of the origin, one per target per repetition
        assert v & M32 == (v >> 32) & M32 == reps * len(targets[r])
    assert not any(lock_words(f, wins))


@FAST
@given(st.lists(st.integers(-10 ** 6, 10 ** 6), min_size=1, max_size=12))
def test_allreduce_matches_builtin(values):
    n = len(values)
    f = make_fabric(n)
    out = f.run(lambda r: (world(f, r).allreduce(values[r], ReduceOp.SUM),
                           world(f, r).allreduce(values[r], ReduceOp.MAX),
                           world(f, r).allreduce(values[r], ReduceOp.MIN)))
    assert out == [(sum(values), max(values), min(values))] * n


@FAST
@given(st.lists(st.binary(min_size=3, max_size=3), min_size=1, max_size=12))
def test_allgather_matches_inputs(chunks):
    f = make_fabric(len(chunks))
    out = f.run(lambda r: world(f, r).allgather(chunks[r]))
    assert all(o == chunks for o in out)


@given(st.integers(1, 1000), st.integers(1, 10 ** 6), st.integers(2, 10))
def test_geometric_range(start, end, factor):
    if end < start:
        return
    vals = cli.parse_range(f"{start}:{end}:x{factor}")
    assert vals[0] == start and vals[-1] <= end < vals[-1] * factor
    assert all(b == a * factor for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 1000), st.integers(0, 1000), st.integers(1, 50))
def test_arithmetic_range(start, end, step):
    if end < start:
        return
    assert cli.parse_range(f"{start}:{end}:+{step}") == list(range(start, end + 1, step))
