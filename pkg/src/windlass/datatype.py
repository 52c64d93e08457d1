"""Minimal derived datatypes and two-sided contiguous block decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import TypeMismatch


class Datatype:
    """Base of the datatype tree. Offsets and strides count inner extents."""

    @property
    def size(self) -> int:
        """Bytes of actual data."""
        raise NotImplementedError

    @property
    def extent(self) -> int:
        raise NotImplementedError

    @cached_property
    def blocks(self) -> tuple[tuple[int, int], ...]:
        """Merged (byte offset, length) runs of one instance, in typemap order."""
        return tuple(_merge(self._raw_blocks()))

    def _raw_blocks(self):
        raise NotImplementedError

    @cached_property
    def signature(self) -> tuple[tuple[str, int], ...]:
        """Run-length encoded sequence of basic elements."""
        out: list[list] = []
        for name, n in self._raw_signature():
            if out and out[-1][0] == name:
                out[-1][1] += n
            else:
                out.append([name, n])
        return tuple((a, b) for a, b in out)

    def _raw_signature(self):
        raise NotImplementedError

    @property
    def basic(self) -> "Basic | None":
        """The single basic type this datatype is built from, if homogeneous."""
        names = {name for name, _ in self.signature}
        return _BASICS.get(names.pop()) if len(names) == 1 else None

    @property
    def is_contiguous(self) -> bool:
        b = self.blocks
        return len(b) == 1 and b[0] == (0, self.extent)


@dataclass(frozen=True, eq=True)
class Basic(Datatype):
    name: str
    nbytes: int
    numpy: str

    @property
    def size(self):
        return self.nbytes

    @property
    def extent(self):
        return self.nbytes

    def _raw_blocks(self):
        yield (0, self.nbytes)

    def _raw_signature(self):
        yield (self.name, 1)

    def __repr__(self):
        return self.name.upper()


INT64 = Basic("int64", 8, "<i8")
FLOAT64 = Basic("float64", 8, "<f8")
BYTE = Basic("byte", 1, "u1")
_BASICS = {b.name: b for b in (INT64, FLOAT64, BYTE)}


@dataclass(frozen=True, eq=True)
class Contig(Datatype):
    count: int
    inner: Datatype

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("negative count")

    @property
    def size(self):
        return self.count * self.inner.size

    @property
    def extent(self):
        return self.count * self.inner.extent

    def _raw_blocks(self):
        ext = self.inner.extent
        for i in range(self.count):
            for off, ln in self.inner.blocks:
                yield (i * ext + off, ln)

    def _raw_signature(self):
        for _ in range(self.count):
            yield from self.inner.signature


@dataclass(frozen=True, eq=True)
class Vector(Datatype):
    count: int
    blocklen: int
    stride: int
    inner: Datatype

    def __post_init__(self):
        if self.count < 0 or self.blocklen < 0 or self.stride < 0:
            raise ValueError("negative count, blocklen or stride")

    @property
    def size(self):
        return self.count * self.blocklen * self.inner.size

    @property
    def extent(self):
        if self.count == 0:
            return 0
        return ((self.count - 1) * self.stride + self.blocklen) * self.inner.extent

    def _raw_blocks(self):
        ext = self.inner.extent
        for i in range(self.count):
            for j in range(self.blocklen):
                base = (i * self.stride + j) * ext
                for off, ln in self.inner.blocks:
                    yield (base + off, ln)

    def _raw_signature(self):
        for _ in range(self.count * self.blocklen):
            yield from self.inner.signature


@dataclass(frozen=True, eq=True)
class Indexed(Datatype):
    offsets: tuple[int, ...]
    blocklens: tuple[int, ...]
    inner: Datatype

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(self.offsets))
        object.__setattr__(self, "blocklens", tuple(self.blocklens))
        if len(self.offsets) != len(self.blocklens):
            raise ValueError("offsets and blocklens differ in length")
        if any(b < 0 for b in self.blocklens) or any(o < 0 for o in self.offsets):
            raise ValueError("negative offset or blocklen")

    @property
    def size(self):
        return sum(self.blocklens) * self.inner.size

    @property
    def extent(self):
        ends = [o + b for o, b in zip(self.offsets, self.blocklens) if b]
        return max(ends, default=0) * self.inner.extent

    def _raw_blocks(self):
        ext = self.inner.extent
        for o, b in zip(self.offsets, self.blocklens):
            for j in range(b):
                for off, ln in self.inner.blocks:
                    yield ((o + j) * ext + off, ln)

    def _raw_signature(self):
        for _ in range(sum(self.blocklens)):
            yield from self.inner.signature


def _merge(blocks):
    out: list[list[int]] = []
    for off, ln in blocks:
        if ln == 0:
            continue
        if out and out[-1][0] + out[-1][1] == off:
            out[-1][1] += ln
        else:
            out.append([off, ln])
    return [(a, b) for a, b in out]


def flatten(dt: Datatype, count: int = 1) -> list[tuple[int, int]]:
    """Merged byte runs of ``count`` consecutive instances of ``dt``."""
    ext = dt.extent
    return _merge((i * ext + off, ln) for i in range(count) for off, ln in dt.blocks)


class Block(NamedTuple):
    origin_offset: int
    target_offset: int
    length: int


def check_signatures(origin_dt: Datatype, origin_count: int,
                     target_dt: Datatype, target_count: int) -> None:
    if origin_dt.size * origin_count != target_dt.size * target_count:
        raise TypeMismatch(
            f"origin carries {origin_dt.size * origin_count} bytes, target {target_dt.size * target_count}")
    if origin_count == 0:
        return
    so = _repeat(origin_dt.signature, origin_count)
    st = _repeat(target_dt.signature, target_count)
    if so != st:
        raise TypeMismatch(f"type signatures differ: {so[:4]}... vs {st[:4]}...")


def _repeat(sig, count):
    out: list[list] = []
    for _ in range(count):
        for name, n in sig:
            if out and out[-1][0] == name:
                out[-1][1] += n
            else:
                out.append([name, n])
    return [tuple(x) for x in out]


def decompose(origin_dt: Datatype, count: int, target_dt: Datatype,
              target_count: int | None = None) -> list[Block]:
    """Fewest blocks contiguous on both sides covering the transferred bytes."""
    if target_count is None:
        target_count = count
    check_signatures(origin_dt, count, target_dt, target_count)
    ob = flatten(origin_dt, count)
    tb = flatten(target_dt, target_count)
    out: list[Block] = []
    i = j = 0
    oo, ol = ob[0] if ob else (0, 0)
    to, tl = tb[0] if tb else (0, 0)
    while i < len(ob) and j < len(tb):
        n = min(ol, tl)
        if out and out[-1].origin_offset + out[-1].length == oo \
                and out[-1].target_offset + out[-1].length == to:
            last = out[-1]
            out[-1] = Block(last.origin_offset, last.target_offset, last.length + n)
        else:
            out.append(Block(oo, to, n))
        oo += n
        to += n
        ol -= n
        tl -= n
        if ol == 0:
            i += 1
            if i < len(ob):
                oo, ol = ob[i]
        if tl == 0:
            j += 1
            if j < len(tb):
                to, tl = tb[j]
    return out


def gather_bytes(buf: np.ndarray | bytes | bytearray | memoryview, dt: Datatype, count: int) -> bytes:
    """Pack ``count`` instances of ``dt`` from ``buf`` into contiguous bytes."""
    mv = memoryview(buf).cast("B")
    return b"".join(bytes(mv[o:o + n]) for o, n in flatten(dt, count))
