import math
import random

import numpy as np
import pytest

from windlass.datatype import (
    BYTE,
    FLOAT64,
    INT64,
    Block,
    Contig,
    Indexed,
    Vector,
    decompose,
    flatten,
    gather_bytes,
)
from windlass.errors import TypeMismatch


# -- independent oracle: expand every byte, then merge runs ---------------------


def byte_offsets(dt):
    """Byte offsets of one instance in typemap order, by direct recursion."""
    if isinstance(dt, Contig):
        inner = byte_offsets(dt.inner)
        return [i * dt.inner.extent + b for i in range(dt.count) for b in inner]
    if isinstance(dt, Vector):
        inner = byte_offsets(dt.inner)
        return [(i * dt.stride + j) * dt.inner.extent + b
                for i in range(dt.count) for j in range(dt.blocklen) for b in inner]
    if isinstance(dt, Indexed):
        inner = byte_offsets(dt.inner)
        return [(o + j) * dt.inner.extent + b
                for o, n in zip(dt.offsets, dt.blocklens) for j in range(n) for b in inner]
    return list(range(dt.nbytes))


def byte_map(dt, count):
    one = byte_offsets(dt)
    return [i * dt.extent + b for i in range(count) for b in one]


def oracle_blocks(odt, oc, tdt, tc):
    ob, tb = byte_map(odt, oc), byte_map(tdt, tc)
    assert len(ob) == len(tb)
    out = []
    for o, t in zip(ob, tb):
        if out and out[-1][0] + out[-1][2] == o and out[-1][1] + out[-1][2] == t:
            out[-1][2] += 1
        else:
            out.append([o, t, 1])
    return [Block(*b) for b in out]


def random_type(rng, base, depth=0):
    if depth >= 2 or rng.random() < 0.25:
        t = base
    else:
        t = random_type(rng, base, depth + 1)
    kind = rng.choice(["contig", "vector", "indexed"])
    if kind == "contig":
        return Contig(rng.randint(1, 4), t)
    if kind == "vector":
        bl = rng.randint(1, 3)
        return Vector(rng.randint(1, 4), bl, bl + rng.randint(0, 3), t)
    n = rng.randint(1, 4)
    offs, cur = [], 0
    for _ in range(n):
        cur += rng.randint(0, 3)
        offs.append(cur)
        cur += 1
    lens = [rng.randint(1, 2) for _ in range(n)]
    # keep indexed blocks from overlapping: spread offsets by blocklens
    fixed, pos = [], 0
    for o, ln in zip(offs, lens):
        pos = max(pos, o)
        fixed.append(pos)
        pos += ln
    return Indexed(tuple(fixed), tuple(lens), t)


def random_pair(seed):
    rng = random.Random(seed)
    base = rng.choice([INT64, FLOAT64, BYTE])
    o, t = random_type(rng, base), random_type(rng, base)
    g = math.gcd(o.size, t.size)
    return o, t.size // g, t, o.size // g


# -- tests ------------------------------------------------------------------------


def test_contig_vs_contig_one_block():
    assert decompose(Contig(10, INT64), 1, Contig(10, INT64)) == [Block(0, 0, 80)]


def test_vector_same_layout_two_blocks():
    v = Vector(2, 1, 2, INT64)
    assert decompose(v, 1, v) == [Block(0, 0, 8), Block(16, 16, 8)]


def test_vector_to_contiguous_three_16_byte_blocks():
    v = Vector(3, 2, 4, FLOAT64)
    blocks = decompose(v, 1, Contig(6, FLOAT64))
    assert blocks == [Block(0, 0, 16), Block(32, 16, 16), Block(64, 32, 16)]


def test_signature_mismatch():
    with pytest.raises(TypeMismatch):
        decompose(Contig(2, INT64), 1, Contig(2, FLOAT64))
    with pytest.raises(TypeMismatch):
        decompose(Contig(2, INT64), 1, Contig(3, INT64))


def test_negative_fields_rejected():
    with pytest.raises(ValueError):
        Vector(2, -1, 2, INT64)
    with pytest.raises(ValueError):
        Indexed((0,), (-1,), INT64)


def test_extent_and_size():
    v = Vector(3, 2, 5, INT64)
    assert v.size == 48 and v.extent == (2 * 5 + 2) * 8
    ix = Indexed((4, 0), (1, 2), BYTE)
    assert ix.size == 3 and ix.extent == 5


@pytest.mark.parametrize("seed", range(50))
def test_decompose_matches_byte_map_oracle(seed):
    o, oc, t, tc = random_pair(seed)
    assert decompose(o, oc, t, tc) == oracle_blocks(o, oc, t, tc)


def test_flatten_covers_byte_map():
    for seed in range(50):
        o, oc, _, _ = random_pair(seed)
        covered = sorted(off + k for off, n in flatten(o, oc) for k in range(n))
        assert covered == sorted(byte_map(o, oc))


def test_gather_bytes_follows_typemap():
    v = Vector(2, 1, 3, BYTE)
    buf = bytes(range(10))
    assert gather_bytes(buf, v, 2) == bytes([0, 3, 4, 7])
    arr = np.arange(6, dtype=np.int64)
    packed = np.frombuffer(gather_bytes(arr, Vector(3, 1, 2, INT64), 1), dtype=np.int64)
    assert packed.tolist() == [0, 2, 4]
