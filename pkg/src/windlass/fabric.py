"""Simulated RDMA fabric: registration, put/get, 8-byte atomics, completion.

This is the only channel between ranks. Every public call that touches
another rank's memory is counted in :class:`OpCounters` and charged to the
issuing rank's virtual clock (integer picoseconds) in deterministic mode.

Cost model, per origin rank:

* inter-node transfer: the origin pays ``issue_inter`` to inject; the wire
  is busy for ``beta_inter * size``; the operation completes ``alpha_inter``
  after leaving the wire. A lone put+wait therefore costs exactly
  ``alpha_inter + beta_inter * size``.
* intra-node transfer: a synchronous direct copy costing
  ``alpha_intra + beta_intra * size``; the handle is complete on return.
* atomics are blocking and cost ``atomic_latency`` (``atomic_latency_intra``
  on the same node).

Clocks follow causality: observing a word written at virtual time ``t``
moves the observer's clock to at least ``t``.
"""

from __future__ import annotations

import bisect
import contextlib
import enum
import hashlib
import random
import struct
import threading
import time
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from .errors import (
    ForeignHandle,
    Misaligned,
    OutOfBounds,
    RegistrationLimit,
    StaleDescriptor,
    ZeroLength,
)
from .scheduler import DeterministicScheduler, ThreadScheduler

MASK64 = (1 << 64) - 1
PAGE = 4096
_Q = struct.Struct("<Q")
_SYMMETRIC_BIT = 1 << 62


class Mode(str, enum.Enum):
    DETERMINISTIC = "deterministic"
    PREEMPTIVE = "preemptive"


class OpClass(str, enum.Enum):
    PUT = "put"
    GET = "get"
    ATOMIC = "atomic"


PUT = OpClass.PUT
GET = OpClass.GET


def to_signed(v: int) -> int:
    v &= MASK64
    return v - (1 << 64) if v >> 63 else v


def _ps(seconds: float) -> int:
    return int(round(seconds * 1e12))


def symmetric_key(*name: Any) -> int:
    """Registration key every rank can compute for the same ``name``."""
    h = hashlib.blake2b(repr(name).encode(), digest_size=8).digest()
    return _SYMMETRIC_BIT | (int.from_bytes(h, "little") & (_SYMMETRIC_BIT - 1))


@dataclass(frozen=True)
class FabricConfig:
    p: int = 8
    ranks_per_node: int = 1
    alpha_inter: float = 1e-6
    beta_inter: float = 0.16e-9
    issue_inter: float = 416e-9
    alpha_intra: float = 80e-9
    beta_intra: float = 0.1e-9
    atomic_latency: float = 2.4e-6
    atomic_latency_intra: float = 50e-9
    seed: int = 42
    mode: Mode = Mode.DETERMINISTIC
    max_registrations: int = 1 << 16
    progress_prob: float = 0.0
    alloc_fail_prob: float = 0.0
    backoff_cap: int = 1024
    max_steps: int | None = None

    def __post_init__(self):
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if self.ranks_per_node < 1:
            raise ValueError("ranks_per_node must be >= 1")
        for name in ("alpha_inter", "beta_inter", "issue_inter", "alpha_intra",
                     "beta_intra", "atomic_latency", "atomic_latency_intra"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.progress_prob <= 1.0 or not 0.0 <= self.alloc_fail_prob <= 1.0:
            raise ValueError("probabilities must lie in [0, 1]")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class RemoteDescriptor:
    owner: int
    key: int
    length: int
    node: int
    address: int = 0

    def for_owner(self, owner: int, node: int) -> "RemoteDescriptor":
        """Same symmetric registration, different owner."""
        return replace(self, owner=owner, node=node)


@dataclass
class OpCounters:
    puts_issued: int = 0
    gets_issued: int = 0
    atomics_issued: int = 0
    puts_intra: int = 0
    gets_intra: int = 0
    atomics_intra: int = 0
    bytes_put: int = 0
    bytes_got: int = 0
    remote_ops_to: Counter = field(default_factory=Counter)
    collectives: Counter = field(default_factory=Counter)

    @property
    def remote_ops(self) -> int:
        return self.puts_issued + self.gets_issued + self.atomics_issued

    def copy(self) -> "OpCounters":
        return replace(self, remote_ops_to=Counter(self.remote_ops_to),
                       collectives=Counter(self.collectives))

    def __sub__(self, other: "OpCounters") -> "OpCounters":
        ops = Counter(self.remote_ops_to)
        ops.subtract(other.remote_ops_to)
        coll = Counter(self.collectives)
        coll.subtract(other.collectives)
        return OpCounters(
            self.puts_issued - other.puts_issued,
            self.gets_issued - other.gets_issued,
            self.atomics_issued - other.atomics_issued,
            self.puts_intra - other.puts_intra,
            self.gets_intra - other.gets_intra,
            self.atomics_intra - other.atomics_intra,
            self.bytes_put - other.bytes_put,
            self.bytes_got - other.bytes_got,
            +ops,
            +coll,
        )


class OpHandle:
    __slots__ = ("id", "origin", "target", "op", "size", "complete", "completion_ps",
                 "_region", "_offset", "_local", "error")

    def __init__(self, hid, origin, target, op, size, region, offset, local, completion_ps):
        self.id = hid
        self.origin = origin
        self.target = target
        self.op = op
        self.size = size
        self.complete = False
        self.completion_ps = completion_ps
        self._region = region
        self._offset = offset
        self._local = local
        self.error: Exception | None = None

    @property
    def state(self) -> str:
        return "COMPLETE" if self.complete else "PENDING"

    def __repr__(self):
        return f"OpHandle({self.id}, {self.op.value} {self.origin}->{self.target}, {self.size}B, {self.state})"


class Segment:
    """A piece of one rank's (simulated) virtual address space."""

    __slots__ = ("owner", "address", "length", "mem")

    def __init__(self, owner: int, address: int, length: int):
        self.owner = owner
        self.address = address
        self.length = length
        self.mem = bytearray(length)

    def view(self, dtype=np.uint8) -> np.ndarray:
        return np.frombuffer(self.mem, dtype=dtype)


class Region:
    __slots__ = ("owner", "key", "segment", "length", "stamps", "live")

    def __init__(self, owner, key, segment, track_time):
        self.owner = owner
        self.key = key
        self.segment = segment
        self.length = segment.length
        self.stamps = np.zeros((segment.length + 7) // 8, dtype=np.int64) if track_time else None
        self.live = True


class AddressSpace:
    """Page-granular allocator over one rank's virtual addresses.

    Tries right after the previous allocation first, then first fit.
    """

    LOW = 1 << 20
    HIGH = 1 << 46

    def __init__(self):
        self._starts: list[int] = []
        self._ends: list[int] = []
        self._next = self.LOW

    @staticmethod
    def _span(size: int) -> int:
        return max(PAGE, (size + PAGE - 1) // PAGE * PAGE)

    def is_free(self, address: int, size: int) -> bool:
        end = address + self._span(size)
        i = bisect.bisect_right(self._starts, address)
        if i > 0 and self._ends[i - 1] > address:
            return False
        return not (i < len(self._starts) and self._starts[i] < end)

    def reserve(self, address: int, size: int) -> bool:
        if address % PAGE or address < self.LOW or address + size > self.HIGH:
            return False
        if not self.is_free(address, size):
            return False
        i = bisect.bisect_right(self._starts, address)
        self._starts.insert(i, address)
        self._ends.insert(i, address + self._span(size))
        return True

    def allocate(self, size: int) -> int:
        if self.reserve(self._next, size):
            cur = self._next
            self._next = cur + self._span(size)
            return cur
        cur = self.LOW
        for s, e in zip(self._starts, self._ends):
            if s - cur >= self._span(size):
                break
            cur = max(cur, e)
        self.reserve(cur, size)
        self._next = cur + self._span(size)
        return cur

    def release(self, address: int) -> None:
        i = bisect.bisect_left(self._starts, address)
        if i < len(self._starts) and self._starts[i] == address:
            del self._starts[i]
            del self._ends[i]

    def __len__(self):
        return len(self._starts)


class Fabric:
    """All ranks' memory plus the transport between them."""

    def __init__(self, config: FabricConfig | None = None, scheduler=None, **overrides):
        if config is None:
            config = FabricConfig(**overrides)
        elif overrides:
            config = replace(config, **overrides)
        self.config = cfg = config
        self.p = cfg.p
        self.deterministic = cfg.mode is Mode.DETERMINISTIC
        if scheduler is None:
            scheduler = (DeterministicScheduler(cfg.seed, backoff_cap=cfg.backoff_cap,
                                                max_steps=cfg.max_steps)
                         if self.deterministic else ThreadScheduler(cfg.seed))
        self.sched = scheduler
        self.sched.progress = self._progress_one
        self.sched.progress_prob = cfg.progress_prob if self.deterministic else 0.0
        self.sched.has_pending = self._any_pending
        self._lock = contextlib.nullcontext() if self.deterministic else threading.RLock()

        self._alpha = (_ps(cfg.alpha_inter), _ps(cfg.alpha_intra))
        self._beta = (_ps(cfg.beta_inter), _ps(cfg.beta_intra))
        self._issue = _ps(cfg.issue_inter)
        self._amo = (_ps(cfg.atomic_latency), _ps(cfg.atomic_latency_intra))

        self._clock = [0] * self.p
        self._nic_free = [0] * self.p
        self._wall0 = time.perf_counter()
        self._counters = [OpCounters() for _ in range(self.p)]
        self._regions: list[dict[int, Region]] = [{} for _ in range(self.p)]
        self._spaces = [AddressSpace() for _ in range(self.p)]
        self._pending: list[dict[int, OpHandle]] = [{} for _ in range(self.p)]
        self._next_key = 1
        self._next_handle = 1
        self._rngs = [random.Random(f"{cfg.seed}:{r}") for r in range(self.p)]
        self.ghost: dict[str, Any] = {}
        self.collective_log: dict[Any, list] = {}

    # -- topology and plumbing --------------------------------------------

    def node_of(self, rank: int) -> int:
        return rank // self.config.ranks_per_node

    def same_node(self, a: int, b: int) -> bool:
        return self.node_of(a) == self.node_of(b)

    def rng(self, rank: int) -> random.Random:
        """Per-rank deterministic RNG for protocol randomness."""
        return self._rngs[rank]

    def run(self, program: Callable[[int], Any], ranks: Sequence[int] | None = None) -> list:
        """Run ``program(rank)`` on every rank (default: all) and collect results."""
        ranks = list(range(self.p)) if ranks is None else list(ranks)
        return self.sched.run([(lambda r=r: program(r)) for r in ranks], ranks)

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.p:
            raise ValueError(f"rank {rank} outside [0, {self.p})")

    # -- memory management -------------------------------------------------

    def alloc(self, rank: int, length: int, address: int | None = None) -> Segment | None:
        """Reserve local memory; with ``address`` the reservation may fail (None)."""
        self._check_rank(rank)
        if length <= 0:
            raise ZeroLength("cannot allocate zero bytes")
        space = self._spaces[rank]
        with self._lock:
            if address is None:
                address = space.allocate(length)
            else:
                fail = self.config.alloc_fail_prob
                if fail and self._rngs[rank].random() < fail:
                    return None
                if not space.reserve(address, length):
                    return None
        return Segment(rank, address, length)

    def free(self, seg: Segment) -> None:
        with self._lock:
            self._spaces[seg.owner].release(seg.address)

    def register_segment(self, rank: int, seg: Segment, key: int | None = None) -> RemoteDescriptor:
        """Expose existing local memory for remote access."""
        if seg.owner != rank:
            raise ValueError("segments can only be registered by their owner")
        regions = self._regions[rank]
        with self._lock:
            if len(regions) >= self.config.max_registrations:
                raise RegistrationLimit(f"rank {rank} exceeded {self.config.max_registrations} registrations")
            if key is None:
                key = self._next_key
                self._next_key += 1
            elif key in regions:
                raise ValueError(f"key {key:#x} already registered at rank {rank}")
            regions[key] = Region(rank, key, seg, self.deterministic)
        return RemoteDescriptor(rank, key, seg.length, self.node_of(rank), seg.address)

    def register(self, rank: int, length: int, key: int | None = None) -> RemoteDescriptor:
        """Allocate ``length`` zeroed bytes at ``rank`` and register them."""
        if length <= 0:
            raise ZeroLength("cannot register a zero-length region")
        seg = self.alloc(rank, length)
        return self.register_segment(rank, seg, key)

    def deregister(self, rank: int, desc: RemoteDescriptor, release: bool = True) -> None:
        with self._lock:
            region = self._regions[rank].pop(desc.key, None)
            if region is None:
                raise StaleDescriptor(f"{desc} is not registered")
            region.live = False
            if release:
                self._spaces[rank].release(region.segment.address)
        self.sched.notify((rank, desc.key), rank)

    def registrations(self, rank: int) -> int:
        return len(self._regions[rank])

    def is_live(self, desc: RemoteDescriptor) -> bool:
        region = self._regions[desc.owner].get(desc.key)
        return region is not None and region.live

    def segment(self, desc: RemoteDescriptor) -> Segment:
        return self._region(desc).segment

    def _region(self, desc: RemoteDescriptor) -> Region:
        region = self._regions[desc.owner].get(desc.key)
        if region is None:
            raise StaleDescriptor(f"no live registration for {desc}")
        return region

    def _bounds(self, region: Region, offset: int, size: int) -> None:
        if offset < 0 or size < 0 or offset + size > region.length:
            raise OutOfBounds(f"[{offset}, {offset + size}) outside region of {region.length} bytes")

    # -- transfers ---------------------------------------------------------

    def transfer(self, origin: int, direction: OpClass, desc: RemoteDescriptor, offset: int,
                 local_buf, size: int | None = None) -> OpHandle:
        """Nonblocking put (``local_buf`` -> remote) or get (remote -> ``local_buf``)."""
        direction = OpClass(direction)
        if direction is OpClass.ATOMIC:
            raise ValueError("use fadd64/cas64 for atomics")
        local = memoryview(local_buf).cast("B")
        if size is None:
            size = len(local)
        if size > len(local):
            raise OutOfBounds(f"local buffer holds {len(local)} bytes, {size} requested")
        self.sched.yield_point()
        with self._lock:
            region = self._region(desc)
            self._bounds(region, offset, size)
            target = desc.owner
            intra = self.same_node(origin, target)
            c = self._counters[origin]
            if direction is PUT:
                c.puts_issued += 1
                c.bytes_put += size
                if intra:
                    c.puts_intra += 1
            else:
                c.gets_issued += 1
                c.bytes_got += size
                if intra:
                    c.gets_intra += 1
            c.remote_ops_to[target] += 1
            hid = self._next_handle
            self._next_handle += 1
            now = self._clock[origin]
            if intra:
                done = now + self._alpha[1] + self._beta[1] * size
                h = OpHandle(hid, origin, target, direction, size, region, offset, local[:size], done)
                self._apply(h)
                self._clock[origin] = max(done, h.completion_ps)
                return h
            self._clock[origin] = now + self._issue
            wire = max(now, self._nic_free[origin]) + self._beta[0] * size
            self._nic_free[origin] = wire
            h = OpHandle(hid, origin, target, direction, size, region, offset, local[:size],
                         wire + self._alpha[0])
            self._pending[origin][hid] = h
            return h

    def put(self, origin: int, desc: RemoteDescriptor, offset: int, data) -> OpHandle:
        return self.transfer(origin, PUT, desc, offset, data)

    def get(self, origin: int, desc: RemoteDescriptor, offset: int, out) -> OpHandle:
        return self.transfer(origin, GET, desc, offset, out)

    def _apply(self, h: OpHandle) -> None:
        region = h._region
        h.complete = True
        if not region.live:
            h.error = StaleDescriptor(f"region {region.key:#x} deregistered before completion")
            return
        lo, hi = h._offset, h._offset + h.size
        mem = region.segment.mem
        stamps = region.stamps
        if h.op is PUT:
            mem[lo:hi] = h._local
            if stamps is not None and h.size:
                stamps[lo // 8:(hi + 7) // 8] = h.completion_ps
        else:
            if stamps is not None and h.size:
                seen = int(stamps[lo // 8:(hi + 7) // 8].max())
                if seen > h.completion_ps:
                    h.completion_ps = seen
            h._local[:] = mem[lo:hi]
        if h.op is PUT:
            self.sched.notify((region.owner, region.key), h.origin)

    def _finish(self, origin: int, handles) -> None:
        clk = self._clock[origin]
        err = None
        for h in handles:
            if not h.complete:
                self._pending[origin].pop(h.id, None)
                self._apply(h)
            if h.completion_ps > clk:
                clk = h.completion_ps
            err = err or h.error
        self._clock[origin] = clk
        if err is not None:
            raise err

    def wait(self, origin: int, handle: OpHandle) -> None:
        if handle.origin != origin:
            raise ForeignHandle(f"{handle} was not issued by rank {origin}")
        if not handle.complete:
            self.sched.yield_point()
        with self._lock:
            self._finish(origin, [handle])

    def test(self, origin: int, handle: OpHandle) -> bool:
        if handle.origin != origin:
            raise ForeignHandle(f"{handle} was not issued by rank {origin}")
        return handle.complete

    def gsync(self, origin: int) -> None:
        """Complete every outstanding operation issued by ``origin``."""
        if not self._pending[origin]:
            return
        self.sched.yield_point()
        with self._lock:
            self._finish(origin, list(self._pending[origin].values()))

    def gsync_to(self, origin: int, target: int) -> None:
        """Complete ``origin``'s outstanding operations addressed to ``target``."""
        pend = self._pending[origin]
        if not pend:
            return
        hs = [h for h in pend.values() if h.target == target]
        if not hs:
            return
        self.sched.yield_point()
        with self._lock:
            self._finish(origin, hs)

    def pending(self, origin: int) -> int:
        return len(self._pending[origin])

    def _any_pending(self) -> bool:
        return any(self._pending)

    def _progress_one(self) -> bool:
        """Asynchronously complete one random outstanding operation."""
        live = [r for r in range(self.p) if self._pending[r]]
        if not live:
            return False
        rng = self.sched.rng
        r = live[rng.randrange(len(live))]
        pend = self._pending[r]
        hid = list(pend)[rng.randrange(len(pend))]
        self._apply(pend.pop(hid))
        return True

    # -- atomics -----------------------------------------------------------

    def _amo_prologue(self, origin, desc, offset) -> Region:
        if offset % 8:
            raise Misaligned(f"atomic offset {offset} is not 8-byte aligned")
        region = self._region(desc)
        self._bounds(region, offset, 8)
        target = desc.owner
        intra = self.same_node(origin, target)
        c = self._counters[origin]
        c.atomics_issued += 1
        if intra:
            c.atomics_intra += 1
        c.remote_ops_to[target] += 1
        done = self._clock[origin] + self._amo[intra]
        if region.stamps is not None:
            w = offset // 8
            seen = int(region.stamps[w])
            if seen > done:
                done = seen
            region.stamps[w] = done
        self._clock[origin] = done
        return region

    def fadd64(self, origin: int, desc: RemoteDescriptor, offset: int, operand: int) -> int:
        """Blocking atomic fetch-and-add; returns the previous (signed) value."""
        self.sched.yield_point()
        with self._lock:
            region = self._amo_prologue(origin, desc, offset)
            mem = region.segment.mem
            (old,) = _Q.unpack_from(mem, offset)
            _Q.pack_into(mem, offset, (old + operand) & MASK64)
        if operand:
            self.sched.notify((region.owner, region.key), origin)
        return to_signed(old)

    def cas64(self, origin: int, desc: RemoteDescriptor, offset: int, compare: int, swap: int) -> int:
        """Blocking atomic compare-and-swap; returns the previous (signed) value."""
        self.sched.yield_point()
        with self._lock:
            region = self._amo_prologue(origin, desc, offset)
            mem = region.segment.mem
            (old,) = _Q.unpack_from(mem, offset)
            hit = old == compare & MASK64
            if hit:
                _Q.pack_into(mem, offset, swap & MASK64)
        if hit:
            self.sched.notify((region.owner, region.key), origin)
        return to_signed(old)

    # -- direct (load/store) access to node-local memory --------------------

    def _direct(self, rank: int, desc: RemoteDescriptor) -> Region:
        if not self.same_node(rank, desc.owner):
            raise PermissionError(f"rank {rank} cannot map memory of rank {desc.owner}")
        return self._region(desc)

    def _observe(self, rank: int, region: Region, offset: int) -> None:
        if region.stamps is not None:
            seen = int(region.stamps[offset // 8])
            if seen > self._clock[rank]:
                self._clock[rank] = seen

    def load64(self, rank: int, desc: RemoteDescriptor, offset: int) -> int:
        region = self._direct(rank, desc)
        self._observe(rank, region, offset)
        return to_signed(_Q.unpack_from(region.segment.mem, offset)[0])

    def store64(self, rank: int, desc: RemoteDescriptor, offset: int, value: int) -> None:
        self.sched.yield_point()
        with self._lock:
            region = self._direct(rank, desc)
            _Q.pack_into(region.segment.mem, offset, value & MASK64)
            if region.stamps is not None:
                region.stamps[offset // 8] = self._clock[rank]
        self.sched.notify((region.owner, region.key), rank)

    def local_fadd64(self, rank: int, desc: RemoteDescriptor, offset: int, operand: int) -> int:
        """CPU atomic on node-local memory; not a fabric operation."""
        self.sched.yield_point()
        with self._lock:
            region = self._direct(rank, desc)
            self._observe(rank, region, offset)
            mem = region.segment.mem
            (old,) = _Q.unpack_from(mem, offset)
            _Q.pack_into(mem, offset, (old + operand) & MASK64)
            if region.stamps is not None:
                region.stamps[offset // 8] = self._clock[rank]
        self.sched.notify((region.owner, region.key), rank)
        return to_signed(old)

    def local_view(self, rank: int, desc: RemoteDescriptor, dtype=np.uint8) -> np.ndarray:
        """Direct numpy view of node-local registered memory."""
        return self._direct(rank, desc).segment.view(dtype)

    def wait_key(self, desc: RemoteDescriptor) -> tuple[int, int]:
        """Key that spinners block on to watch ``desc``'s region."""
        return (desc.owner, desc.key)

    def observe(self, desc: RemoteDescriptor) -> tuple:
        """Snapshot for a later ``spinner.wait(..., seen=...)`` on ``desc``."""
        return self.sched.observe(((desc.owner, desc.key),))

    # -- clocks and counters ---------------------------------------------

    def clock_ps(self, rank: int) -> int:
        return self._clock[rank]

    def clock_now(self, rank: int) -> float:
        if not self.deterministic:
            return time.perf_counter() - self._wall0
        return self._clock[rank] / 1e12

    def advance(self, rank: int, seconds: float) -> None:
        """Charge local (non-communication) time to ``rank``."""
        self._clock[rank] += _ps(seconds)

    def sync_clocks(self, ranks: Sequence[int] | None = None) -> int:
        """Align clocks of ``ranks`` to their maximum (benchmark plumbing)."""
        ranks = range(self.p) if ranks is None else ranks
        t = max(self._clock[r] for r in ranks)
        for r in ranks:
            self._clock[r] = t
        return t

    def counters(self, rank: int) -> OpCounters:
        return self._counters[rank]

    def counters_snapshot(self) -> list[OpCounters]:
        return [c.copy() for c in self._counters]
