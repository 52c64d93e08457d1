"""Barrier, broadcast, allgather and allreduce over fabric puts and atomics.

Each member registers a flag region and a scratch region under keys that
every rank derives from the context name, so a member only needs the
partner's rank to address it: per-rank state is O(1) besides the scratch.

* barrier: dissemination, ceil(log2 n) rounds, one fetch-add per round.
* allgather: Bruck, ceil(log2 n) rounds of one put plus one fetch-add,
  double-buffered by call parity.
* broadcast: binomial tree followed by a barrier so the receive area can be
  reused by the next call.
* allreduce: allgather followed by a local reduction.

Flags are cumulative counters, never reset: call number ``s`` of a kind
waits for its round flag to reach ``s``.
"""

from __future__ import annotations

import enum
import struct
from typing import Sequence

import numpy as np

from .errors import ProtocolError
from .fabric import Fabric, RemoteDescriptor, symmetric_key


def ceil_log2(n: int) -> int:
    return (n - 1).bit_length() if n > 1 else 0


class ReduceOp(str, enum.Enum):
    AND = "and"
    OR = "or"
    SUM = "sum"
    MAX = "max"
    MIN = "min"


_REDUCERS = {
    ReduceOp.AND: lambda a: np.logical_and.reduce(a, axis=0),
    ReduceOp.OR: lambda a: np.logical_or.reduce(a, axis=0),
    ReduceOp.SUM: lambda a: a.sum(axis=0),
    ReduceOp.MAX: lambda a: a.max(axis=0),
    ReduceOp.MIN: lambda a: a.min(axis=0),
}


class CollectiveContext:
    """One rank's view of a group able to run collectives."""

    def __init__(self, fabric: Fabric, rank: int, members: Sequence[int], name: tuple,
                 slot_bytes: int = 64, bcast_bytes: int = 64, _register: bool = True):
        self.fabric = fabric
        self.rank = rank
        self.members = tuple(members)
        self.n = len(self.members)
        self.me = self.members.index(rank)
        self.name = name
        self.rounds = ceil_log2(self.n)
        self._flag_words = 2 * self.rounds + 1
        self._flags_key = symmetric_key("ctx", name, "flags")
        self._slot = slot_bytes
        self._bcast = bcast_bytes
        self._gen = 0
        self._seq = {"barrier": 0, "allgather": 0, "bcast": 0}
        self._calls = 0
        self._children = 0
        self.flags: RemoteDescriptor | None = None
        self.scratch: RemoteDescriptor | None = None
        if _register:
            self._register_regions()

    # -- layout --------------------------------------------------------------

    def _scratch_len(self) -> int:
        return 2 * self.n * self._slot + self._bcast

    def _scratch_key(self) -> int:
        return symmetric_key("ctx", self.name, "scratch", self._gen)

    def _register_regions(self) -> None:
        f = self.fabric
        self.flags = f.register(self.rank, 8 * self._flag_words, key=self._flags_key)
        self.scratch = f.register(self.rank, self._scratch_len(), key=self._scratch_key())

    def _peer(self, idx: int, local: RemoteDescriptor) -> RemoteDescriptor:
        owner = self.members[idx % self.n]
        return local.for_owner(owner, self.fabric.node_of(owner))

    @property
    def group(self) -> tuple[int, ...]:
        return self.members

    def state_bytes(self) -> int:
        return 8 * self._flag_words + 8 * len(self._seq) + 48

    # -- construction ----------------------------------------------------------

    @classmethod
    def world(cls, fabric: Fabric, rank: int) -> "CollectiveContext":
        """Context spanning every rank; regions are set up once, launcher-style."""
        ctxs = fabric.ghost.get("world_ctx")
        if ctxs is None:
            ctxs = [cls(fabric, r, range(fabric.p), ("world",)) for r in range(fabric.p)]
            fabric.ghost["world_ctx"] = ctxs
        return ctxs[rank]

    def subgroup(self, members: Sequence[int]) -> "CollectiveContext | None":
        """Collective over this context; returns the new context on members only."""
        members = tuple(sorted(members))
        self._children += 1
        name = self.name + ("sub", self._children, members)
        self._check_call("subgroup", members)
        ctx = None
        if self.rank in members:
            ctx = CollectiveContext(self.fabric, self.rank, members, name,
                                    self._slot, self._bcast)
        self.barrier()
        return ctx

    def split_by_node(self) -> "CollectiveContext":
        """Collective; every member gets the context of its node-mates.

        Node membership is known from the topology, so no data is exchanged.
        """
        f = self.fabric
        node = f.node_of(self.rank)
        self._children += 1
        self._check_call("split_node", None)
        members = [r for r in self.members if f.node_of(r) == node]
        ctx = CollectiveContext(f, self.rank, members, self.name + ("node", self._children, node),
                                self._slot, self._bcast)
        self.barrier()
        return ctx

    def free(self) -> None:
        self.barrier()
        self.fabric.deregister(self.rank, self.flags)
        self.fabric.deregister(self.rank, self.scratch)

    # -- bookkeeping ---------------------------------------------------------

    def _check_call(self, kind: str, params) -> None:
        self.fabric.counters(self.rank).collectives[kind] += 1
        self._calls += 1
        if not self.fabric.deterministic:
            return
        log = self.fabric.collective_log
        k = (self.name, self._calls)
        entry = log.get(k)
        if entry is None:
            log[k] = [kind, params, 1]
            return
        if entry[0] != kind or entry[1] != params:
            raise ProtocolError(
                f"rank {self.rank} called {kind}{params!r} as call {self._calls} of {self.name}, "
                f"another member called {entry[0]}{entry[1]!r}")
        entry[2] += 1
        if entry[2] == self.n:
            del log[k]

    def _wait_flag(self, word: int, target: int) -> None:
        f = self.fabric
        spin = None
        while f.load64(self.rank, self.flags, 8 * word) < target:
            if spin is None:
                spin = f.sched.spinner()
            spin.wait((f.wait_key(self.flags),))

    def _signal(self, idx: int, word: int) -> None:
        self.fabric.fadd64(self.rank, self._peer(idx, self.flags), 8 * word, 1)

    # -- collectives -----------------------------------------------------------

    def barrier(self) -> None:
        self._check_call("barrier", None)
        self._barrier_rounds()

    def _barrier_rounds(self) -> None:
        self._seq["barrier"] += 1
        seq = self._seq["barrier"]
        for k in range(self.rounds):
            self._signal(self.me + (1 << k), k)
            self._wait_flag(k, seq)

    def reserve_scratch(self, slot_bytes: int = 0, bcast_bytes: int = 0) -> None:
        """Collectively grow the scratch region; no-op when already large enough."""
        slot = max(8, -(-slot_bytes // 8) * 8)
        bcast = max(8, -(-bcast_bytes // 8) * 8)
        if slot <= self._slot and bcast <= self._bcast:
            return
        f = self.fabric
        f.deregister(self.rank, self.scratch)
        self._slot = max(self._slot, slot)
        self._bcast = max(self._bcast, bcast)
        self._gen += 1
        self.scratch = f.register(self.rank, self._scratch_len(), key=self._scratch_key())
        self._barrier_rounds()

    def allgather(self, contrib: bytes) -> list[bytes]:
        """Every member contributes ``len(contrib)`` bytes; all get all, in member order."""
        contrib = bytes(contrib)
        size = len(contrib)
        self._check_call("allgather", size)
        self.reserve_scratch(slot_bytes=size)
        stride = max(8, -(-size // 8) * 8)
        self._seq["allgather"] += 1
        seq = self._seq["allgather"]
        n, f, rank = self.n, self.fabric, self.rank
        base = (seq % 2) * n * self._slot
        mem = f.segment(self.scratch).mem
        mem[base:base + size] = contrib
        view = memoryview(mem)
        for k in range(self.rounds):
            d = 1 << k
            cnt = min(d, n - d)
            dest = self._peer(self.me - d, self.scratch)
            f.put(rank, dest, base + d * stride, view[base:base + cnt * stride])
            f.gsync_to(rank, dest.owner)
            self._signal(self.me - d, self.rounds + k)
            self._wait_flag(self.rounds + k, seq)
        out = [b""] * n
        for i in range(n):
            off = base + i * stride
            out[(self.me + i) % n] = bytes(mem[off:off + size])
        return out

    def broadcast(self, root: int, data: bytes | None, nbytes: int) -> bytes:
        """Binomial-tree broadcast of ``nbytes`` from member index ``root``."""
        self._check_call("bcast", (root, nbytes))
        self.reserve_scratch(bcast_bytes=nbytes)
        n, f, rank = self.n, self.fabric, self.rank
        base = 2 * n * self._slot
        mem = f.segment(self.scratch).mem
        rel = (self.me - root) % n
        if rel == 0:
            if data is None or len(data) != nbytes:
                raise ProtocolError("broadcast root must supply exactly nbytes")
            mem[base:base + nbytes] = data
        else:
            self._seq["bcast"] += 1
            self._wait_flag(2 * self.rounds, self._seq["bcast"])
        payload = memoryview(mem)[base:base + nbytes]
        for k in reversed(range(self.rounds)):
            d = 1 << k
            if d > rel and rel + d < n:
                dest = self._peer(self.me + d, self.scratch)
                f.put(rank, dest, base, payload)
                f.gsync_to(rank, dest.owner)
                self._signal(self.me + d, 2 * self.rounds)
        result = bytes(payload)
        self._barrier_rounds()
        return result

    def allreduce(self, value, op: ReduceOp | str = ReduceOp.SUM):
        """Reduce scalars or equal-shape numpy arrays across all members."""
        op = ReduceOp(op)
        arr = np.asarray(value)
        scalar = arr.ndim == 0
        if arr.dtype == np.bool_:
            arr = arr.astype(np.int64)
            out_type = bool
        elif np.issubdtype(arr.dtype, np.integer):
            arr = arr.astype(np.int64)
            out_type = int
        else:
            arr = arr.astype(np.float64)
            out_type = float
        parts = self.allgather(np.ascontiguousarray(arr).tobytes())
        stacked = np.stack([np.frombuffer(b, dtype=arr.dtype).reshape(arr.shape) for b in parts])
        red = _REDUCERS[op](stacked)
        if scalar:
            return out_type(red)
        return red.astype(bool) if out_type is bool else red

    def allgather_ints(self, values: Sequence[int]) -> np.ndarray:
        """Allgather fixed-length int64 records; returns shape (n, len(values))."""
        rec = struct.pack(f"<{len(values)}q", *values)
        parts = self.allgather(rec)
        return np.frombuffer(b"".join(parts), dtype="<i8").reshape(self.n, len(values))
