import numpy as np
import pytest

from windlass.errors import ForeignHandle, Misaligned, OutOfBounds, StaleDescriptor, ZeroLength
from windlass.fabric import Fabric, FabricConfig, Mode

from conftest import make_fabric

ALPHA, BETA = 1e-6, 0.16e-9


def test_register_descriptor_fields():
    f = make_fabric(2)
    d = f.register(0, 4096)
    assert (d.owner, d.length) == (0, 4096)
    assert bytes(f.segment(d).mem) == bytes(4096)


def test_register_zero_length_rejected():
    with pytest.raises(ZeroLength):
        make_fabric(2).register(0, 0)


def test_keys_unique_over_many_registrations():
    f = Fabric(FabricConfig(p=2, max_registrations=20000))
    keys = {f.register(r % 2, 8).key for r in range(10_000)}
    assert len(keys) == 10_000


def test_put_wait_round_trip():
    f = make_fabric(2)
    d = f.register(1, 64)
    src = np.arange(8, dtype=np.uint8)

    def body(r):
        f.wait(0, f.put(0, d, 8, src))

    f.run(body, [0])
    assert bytes(f.segment(d).mem[8:16]) == src.tobytes()


def test_out_of_bounds_and_stale():
    f = make_fabric(2)
    d = f.register(1, 16)
    with pytest.raises(OutOfBounds):
        f.put(0, d, 12, b"12345678")
    f.deregister(1, d)
    with pytest.raises(StaleDescriptor):
        f.put(0, d, 0, b"x")


def test_mirror_oracle_random_round_trips():
    """Random puts/gets against a plain bytearray mirror of the target."""
    f = make_fabric(3)
    size = 1 << 17
    d = f.register(2, size)
    mirror = bytearray(size)
    rng = np.random.default_rng(7)
    bad = []

    def body(r):
        for _ in range(1000):
            n = int(rng.integers(1, 65537))
            off = int(rng.integers(0, size - n + 1))
            if rng.random() < 0.5:
                data = rng.integers(0, 256, n, dtype=np.uint8)
                f.wait(r, f.put(r, d, off, data))
                mirror[off:off + n] = data.tobytes()
            else:
                out = np.zeros(n, dtype=np.uint8)
                f.wait(r, f.get(r, d, off, out))
                if out.tobytes() != bytes(mirror[off:off + n]):
                    bad.append(off)

    f.run(body, [0])
    assert not bad
    assert bytes(f.segment(d).mem) == bytes(mirror)


def test_gsync_makes_100_puts_visible():
    f = make_fabric(2)
    d = f.register(1, 800)
    mirror = np.zeros(100, dtype=np.int64)

    def body(r):
        for i in range(100):
            v = np.array([i * 7 + 1], dtype=np.int64)
            mirror[i] = v[0]
            f.put(0, d, 8 * i, v)
        assert f.pending(0) == 100
        f.gsync(0)
        assert f.pending(0) == 0

    f.run(body, [0])
    assert np.array_equal(f.segment(d).view(np.int64), mirror)


def test_wait_idempotent_and_foreign_handle():
    f = make_fabric(3)
    d = f.register(1, 8)
    h = f.put(0, d, 0, b"abcdefgh")
    f.wait(0, h)
    f.wait(0, h)
    assert h.state == "COMPLETE"
    with pytest.raises(ForeignHandle):
        f.wait(2, h)


def test_gsync_with_nothing_outstanding_is_free():
    f = make_fabric(2)
    before = f.counters(0).remote_ops
    t0 = f.clock_ps(0)
    f.gsync(0)
    assert f.counters(0).remote_ops == before and f.clock_ps(0) == t0


def test_fadd_and_failed_cas():
    f = make_fabric(2)
    d = f.register(1, 16)
    f.run(lambda r: f.fadd64(0, d, 0, 1), [0])
    assert f.load64(1, d, 0) == 1
    f.run(lambda r: f.fadd64(0, d, 8, 5), [0])
    old = f.run(lambda r: f.cas64(0, d, 8, 0, 7), [0])[0]
    assert old == 5 and f.load64(1, d, 8) == 5


def test_misaligned_atomic():
    f = make_fabric(2)
    d = f.register(1, 16)
    with pytest.raises(Misaligned):
        f.fadd64(0, d, 4, 1)


def test_concurrent_fadd_returns_a_permutation():
    p, n = 16, 1000
    f = make_fabric(p)
    d = f.register(0, 8)
    out = f.run(lambda r: [f.fadd64(r, d, 0, 1) for _ in range(n)])
    seen = sorted(v for vs in out for v in vs)
    assert seen == list(range(p * n))
    assert f.load64(0, d, 0) == p * n


def test_counters_exact():
    f = make_fabric(4, ranks_per_node=2)
    d_far = f.register(2, 64)
    d_near = f.register(1, 64)

    def body(r):
        f.put(0, d_far, 0, b"x" * 10)
        f.get(0, d_far, 0, bytearray(4))
        f.put(0, d_near, 0, b"y" * 3)
        f.fadd64(0, d_far, 8, 1)
        f.cas64(0, d_near, 8, 0, 1)
        f.gsync(0)

    f.run(body, [0])
    c = f.counters(0)
    assert (c.puts_issued, c.gets_issued, c.atomics_issued) == (2, 1, 2)
    assert (c.puts_intra, c.gets_intra, c.atomics_intra) == (1, 0, 1)
    assert (c.bytes_put, c.bytes_got) == (13, 4)
    assert dict(c.remote_ops_to) == {2: 3, 1: 2}
    assert all(f.counters(r).remote_ops == 0 for r in (1, 2, 3))


def test_clock_single_put():
    f = make_fabric(2)
    d = f.register(1, 8)
    f.run(lambda r: f.wait(0, f.put(0, d, 0, bytes(8))), [0])
    assert f.clock_ps(0) == round((ALPHA + 8 * BETA) * 1e12)
    # 1 us + 8 * 0.16 ns
    assert f.clock_now(0) == pytest.approx(1.00128e-6, rel=1e-12)


def test_clock_zero_ops():
    f = make_fabric(2)
    assert f.clock_now(0) == 0.0


@pytest.mark.parametrize("n,s", [(1, 1), (5, 64), (17, 4096)])
def test_clock_n_sequential_puts(n, s):
    f = make_fabric(2)
    d = f.register(1, s)
    buf = bytes(s)

    def body(r):
        for _ in range(n):
            f.wait(0, f.put(0, d, 0, buf))

    f.run(body, [0])
    assert f.clock_ps(0) == n * round((ALPHA + s * BETA) * 1e12)


def test_atomic_latency_defaults():
    f = make_fabric(2)
    d = f.register(1, 8)
    f.run(lambda r: f.fadd64(0, d, 0, 1), [0])
    assert f.clock_now(0) == pytest.approx(2.4e-6)


def test_preemptive_mode_runs_threads():
    f = Fabric(FabricConfig(p=4, mode=Mode.PREEMPTIVE))
    d = f.register(0, 8)
    f.run(lambda r: [f.fadd64(r, d, 0, 1) for _ in range(200)])
    assert f.load64(0, d, 0) == 800


def test_no_remote_agent():
    """A rank that never runs does no work: its counters and clock stay at 0."""
    f = make_fabric(3)
    d = f.register(2, 8)
    f.run(lambda r: [f.fadd64(r, d, 0, 1) for _ in range(10)], [0, 1])
    assert f.counters(2).remote_ops == 0 and f.clock_ps(2) == 0
    assert f.load64(2, d, 0) == 20
