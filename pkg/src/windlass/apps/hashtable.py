"""Distributed hashtable with CAS inserts and per-rank overflow heaps.

Each rank's window holds, in 8-byte words::

    [0]                    next_free (heap allocation counter)
    [1 + 2*i, 2 + 2*i]     table slot i: (value, next)       i < T
    [1 + 2*T + 2*h, ...]   heap entry h: (value, next)       h < H

``next`` is a heap index or NIL. An empty slot holds EMPTY as its value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import comm, sync
from ..collectives import CollectiveContext, ReduceOp
from ..errors import CorruptChain, HeapExhausted
from ..window import Window, WindowConfig, win_allocate, win_free

EMPTY = -(1 << 63)
NIL = -1
_M64 = (1 << 64) - 1


def _mix(x: int, seed: int) -> int:
    """splitmix64 finalizer over ``x ^ seed``."""
    z = (x ^ seed) & _M64
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


@dataclass
class InsertStats:
    attempted: int = 0
    slot_hits: int = 0
    heap_inserts: int = 0
    link_retries: int = 0
    heap_exhausted: int = 0


@dataclass
class VerifyReport:
    local_count: int
    global_count: int
    values: list[int]


class DistributedHashtable:
    """One rank's handle. Construction and :meth:`close` are collective."""

    def __init__(self, ctx: CollectiveContext, table_size: int = 1024, heap_size: int = 1024,
                 seed: int = 42):
        self.ctx = ctx
        self.rank = ctx.rank
        self.p = ctx.n
        self.T = table_size
        self.H = heap_size
        self.seed1 = _mix(seed, 0x5EED)
        self.seed2 = _mix(seed, 0xF00D)
        words = 1 + 2 * table_size + 2 * heap_size
        self.win: Window = win_allocate(ctx, 8 * words, disp_unit=8, config=WindowConfig(k_max=1))
        mem = self.win.array(np.int64)
        mem[1:1 + 2 * table_size:2] = EMPTY
        mem[2:2 + 2 * table_size:2] = NIL
        mem[1 + 2 * table_size::2] = EMPTY
        mem[2 + 2 * table_size::2] = NIL
        self.last_hint: dict[tuple[int, int], int] = {}
        self.stats = InsertStats()
        ctx.barrier()
        sync.lock_all(self.win)

    # -- layout helpers --------------------------------------------------------

    def locate(self, key: int) -> tuple[int, int]:
        return _mix(key, self.seed1) % self.p, _mix(key, self.seed2) % self.T

    def _slot_word(self, slot: int) -> int:
        return 1 + 2 * slot

    def _heap_word(self, h: int) -> int:
        return 1 + 2 * self.T + 2 * h

    # -- operations -----------------------------------------------------------

    def insert(self, key: int, value: int) -> None:
        """Store ``value`` in the chain of ``key``'s slot."""
        if value == EMPTY:
            raise ValueError("value collides with the EMPTY sentinel")
        self.stats.attempted += 1
        win = self.win
        owner, slot = self.locate(key)
        sw = self._slot_word(slot)
        if comm.compare_and_swap(win, owner, EMPTY, value, sw) == EMPTY:
            self.stats.slot_hits += 1
            return
        h = comm.fetch_and_op(win, owner, 1, 0, comm.AccOp.SUM)
        if h >= self.H:
            comm.fetch_and_op(win, owner, -1, 0, comm.AccOp.SUM)
            self.stats.heap_exhausted += 1
            raise HeapExhausted(f"heap of rank {owner} is full ({self.H} entries)")
        hw = self._heap_word(h)
        entry = np.array([value, NIL], dtype=np.int64)
        comm.put(win, owner, entry, target_disp=hw)
        sync.flush(win, owner)
        # link behind the last entry we know of; a lost CAS re-walks from the slot
        hint = self.last_hint.get((owner, slot))
        cur = self._heap_word(hint) + 1 if hint is not None else sw + 1
        while True:
            seen = comm.compare_and_swap(win, owner, NIL, h, cur)
            if seen == NIL:
                break
            self.stats.link_retries += 1
            cur = self._heap_word(seen) + 1
        self.last_hint[(owner, slot)] = h
        self.stats.heap_inserts += 1

    def flush(self) -> None:
        sync.flush_all(self.win)

    def verify(self) -> VerifyReport:
        """Collective: walk the local volume, validate chains, sum counts."""
        sync.flush_all(self.win)
        self.ctx.barrier()
        mem = self.win.array(np.int64)
        T, H = self.T, self.H
        table = mem[1:1 + 2 * T].reshape(T, 2)
        heap = mem[1 + 2 * T:].reshape(H, 2)
        used = int(mem[0])
        if not 0 <= used <= H:
            raise CorruptChain(f"next_free={used} outside [0, {H}]")
        owner_of = np.full(H, -1, dtype=np.int64)
        values: list[int] = []
        for i in range(T):
            v, nxt = int(table[i, 0]), int(table[i, 1])
            if v == EMPTY:
                if nxt != NIL:
                    raise CorruptChain(f"empty slot {i} has a chain")
                continue
            values.append(v)
            steps = 0
            while nxt != NIL:
                if not 0 <= nxt < used:
                    raise CorruptChain(f"slot {i} links to unallocated heap entry {nxt}")
                if owner_of[nxt] != -1:
                    raise CorruptChain(f"heap entry {nxt} reachable from slots {owner_of[nxt]} and {i}")
                owner_of[nxt] = i
                values.append(int(heap[nxt, 0]))
                nxt = int(heap[nxt, 1])
                steps += 1
                if steps > H:
                    raise CorruptChain(f"cycle in chain of slot {i}")
        total = self.ctx.allreduce(len(values), ReduceOp.SUM)
        return VerifyReport(len(values), total, values)

    def close(self) -> None:
        sync.unlock_all(self.win)
        win_free(self.win)


def run_hashtable(fabric, inserts_per_rank: int = 16384, table_size: int | None = None,
                  heap_size: int | None = None, seed: int = 42) -> dict:
    """Every rank inserts random keys; returns the global conservation summary."""
    n_ins = inserts_per_rank
    T = table_size or max(16, n_ins)
    H = heap_size or max(16, n_ins)

    def body(r):
        ctx = CollectiveContext.world(fabric, r)
        ht = DistributedHashtable(ctx, T, H, seed)
        rng = np.random.default_rng([seed, r])
        values = rng.integers(1, 1 << 62, size=n_ins, dtype=np.int64)
        ctx.barrier()
        t0 = fabric.clock_now(r)
        exhausted = 0
        for v in values.tolist():
            try:
                ht.insert(v, v)
            except HeapExhausted:
                exhausted += 1
        ht.flush()
        elapsed = fabric.clock_now(r) - t0
        report = ht.verify()
        ht.close()
        return values, exhausted, elapsed, report

    out = fabric.run(body)
    sent = np.concatenate([o[0] for o in out])
    found = np.array(sorted(v for o in out for v in o[3].values), dtype=np.int64)
    exhausted = sum(o[1] for o in out)
    elapsed = max(o[2] for o in out)
    return {
        "attempted": int(sent.size),
        "found": int(found.size),
        "heap_exhausted": exhausted,
        "global_count": out[0][3].global_count,
        "lost": int(sent.size - found.size - exhausted),
        "multiset_ok": exhausted == 0 and bool(np.array_equal(np.sort(sent), found)),
        "virtual_s": elapsed,
        "inserts_per_s_virtual": sent.size / elapsed if elapsed else 0.0,
    }
