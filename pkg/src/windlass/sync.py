"""Epoch synchronization: fence, post/start/complete/wait, locks, flushes.

Lock words
----------
Each target's sync block has a *local* lock word: bit 63 marks an
exclusive holder, the low bits count shared holders. Window member 0 also
hosts the *global* lock word: the high 32 bits count lock_all holders, the
low 32 bits count ranks holding at least one exclusive lock. An exclusive
lock on any target excludes lock_all and vice versa; shared locks touch
only the target.

Matching ring
-------------
``post`` appends its rank to each target's ring with one fetch-add on the
packed ``head << 32 | tail`` word and one put into the claimed slot.
``start`` scans its own ring with local loads only.
"""

from __future__ import annotations

import enum
import struct
from typing import Iterable

import numpy as np

from .errors import (
    AlreadyLocked,
    EpochConflict,
    MatchingListOverflow,
    NoPassiveEpoch,
    NotLocked,
)
from .window import (
    ACC_LOCK,
    COMPLETION,
    GLOBAL_LOCK,
    LOCAL_LOCK,
    M32,
    MATCH,
    Window,
)

WRITER = 1 << 63
ALL_UNIT = 1 << 32
CONSUMED = -1
_Q = struct.Struct("<q")


class LockType(str, enum.Enum):
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


def _monitor(win: Window):
    return win.fabric.ghost.get("lock_monitor")


def _read_remote(win: Window, desc, offset: int) -> int:
    f = win.fabric
    buf = bytearray(8)
    f.wait(win.rank, f.get(win.rank, desc, offset, buf))
    return _Q.unpack(buf)[0]


# -- fence -------------------------------------------------------------------


def fence(win: Window, assert_: str | None = None) -> None:
    """Complete all outstanding operations, then barrier over the window group."""
    st = win.sync
    if st.access is not None or st.exposure is not None or st.passive_open:
        raise EpochConflict("fence inside a post/start or passive epoch")
    win.fabric.gsync(win.rank)
    win.ctx.barrier()
    st.fence_open = assert_ != "nosucceed"


# -- general active target ---------------------------------------------------


def post(win: Window, group: Iterable[int]) -> None:
    """Open an exposure epoch for the origins in ``group``."""
    st = win.sync
    if st.exposure is not None:
        raise EpochConflict("exposure epoch already open")
    group = tuple(group)
    f = win.fabric
    token = _Q.pack(win.me + 1)
    for j in group:
        desc, off = win.sync_loc(j, MATCH)
        v = f.fadd64(win.rank, desc, off, 1)
        tail, head = v & M32, (v >> 32) & M32
        if tail - head >= win.capacity:
            raise MatchingListOverflow(f"matching ring of {j} holds {tail - head} posts")
        sdesc, soff = win.sync_slot(j, tail)
        f.put(win.rank, sdesc, soff, token)
        f.gsync_to(win.rank, sdesc.owner)
    st.exposure = group


def start(win: Window, group: Iterable[int]) -> None:
    """Open an access epoch once every member of ``group`` has posted to us."""
    st = win.sync
    if st.access is not None:
        raise EpochConflict("access epoch already open")
    group = tuple(group)
    f = win.fabric
    desc, moff = win.sync_loc(win.me, MATCH)
    spin = None
    while not _match(win, group, desc, moff):
        if spin is None:
            spin = f.sched.spinner()
        spin.wait((f.wait_key(desc),))
    st.access = group


def _match(win: Window, group: tuple[int, ...], desc, moff: int) -> bool:
    f = win.fabric
    v = f.load64(win.rank, desc, moff)
    tail, head = v & M32, (v >> 32) & M32
    need = {j + 1 for j in group}
    found: list[int] = []
    for i in range(head, tail):
        sdesc, soff = win.sync_slot(win.me, i)
        tok = f.load64(win.rank, sdesc, soff)
        if tok in need:
            need.discard(tok)
            found.append(soff)
    if need:
        return False
    mem = f.local_view(win.rank, desc, np.int64)
    for soff in found:
        mem[soff // 8] = CONSUMED
    # reclaim the consumed prefix of the ring
    n = 0
    for i in range(head, tail):
        _, soff = win.sync_slot(win.me, i)
        if mem[soff // 8] != CONSUMED:
            break
        mem[soff // 8] = 0
        n += 1
    if n:
        f.local_fadd64(win.rank, desc, moff, n << 32)
    return True


def complete(win: Window) -> None:
    """Close the access epoch: flush, then bump each target's completion counter."""
    st = win.sync
    if st.access is None:
        raise EpochConflict("complete without start")
    f = win.fabric
    for j in st.access:
        f.gsync_to(win.rank, win.owner_of(j))
    for j in st.access:
        desc, off = win.sync_loc(j, COMPLETION)
        f.fadd64(win.rank, desc, off, 1)
    st.access = None


def wait(win: Window) -> None:
    """Close the exposure epoch after every origin has completed."""
    st = win.sync
    if st.exposure is None:
        raise EpochConflict("wait without post")
    f = win.fabric
    desc, off = win.sync_loc(win.me, COMPLETION)
    spin = None
    while f.load64(win.rank, desc, off) < len(st.exposure):
        if spin is None:
            spin = f.sched.spinner()
        spin.wait((f.wait_key(desc),))
    f.local_fadd64(win.rank, desc, off, -len(st.exposure))
    st.exposure = None


def test(win: Window) -> bool:
    """Nonblocking ``wait``; closes the exposure epoch when it returns True."""
    st = win.sync
    if st.exposure is None:
        raise EpochConflict("test without post")
    f = win.fabric
    desc, off = win.sync_loc(win.me, COMPLETION)
    if f.load64(win.rank, desc, off) < len(st.exposure):
        return False
    f.local_fadd64(win.rank, desc, off, -len(st.exposure))
    st.exposure = None
    return True


# -- passive target ------------------------------------------------------------


def lock(win: Window, target: int, lock_type: LockType | str = LockType.EXCLUSIVE) -> None:
    lock_type = LockType(lock_type)
    st = win.sync
    win._check_target(target)
    if target in st.locks:
        raise AlreadyLocked(f"target {target} already locked")
    if st.lock_all or st.access is not None or st.exposure is not None:
        raise EpochConflict("lock inside lock_all or an active-target epoch")
    f = win.fabric
    ldesc, loff = win.sync_loc(target, LOCAL_LOCK)
    if lock_type is LockType.SHARED:
        old = f.fadd64(win.rank, ldesc, loff, 1)
        spin = None
        while old & WRITER:
            if spin is None:
                spin = f.sched.spinner()
            spin.wait((f.wait_key(ldesc),))
            old = _read_remote(win, ldesc, loff)
    else:
        gdesc, goff = win.sync_loc(0, GLOBAL_LOCK)
        spin = f.sched.spinner()
        while True:
            took_global = False
            if st.exclusive_held == 0:
                while True:
                    old = f.fadd64(win.rank, gdesc, goff, 1)
                    if (old >> 32) & M32 == 0:
                        break
                    old = f.fadd64(win.rank, gdesc, goff, -1)
                    seen = f.observe(gdesc)
                    if (old >> 32) & M32:
                        spin.backoff((f.wait_key(gdesc),), seen)
                took_global = True
            if f.cas64(win.rank, ldesc, loff, 0, WRITER) == 0:
                break
            seen = f.observe(ldesc)
            if took_global:
                f.fadd64(win.rank, gdesc, goff, -1)
            spin.backoff((f.wait_key(ldesc),), seen)
        st.exclusive_held += 1
    st.locks[target] = lock_type.value
    mon = _monitor(win)
    if mon is not None:
        mon.acquired(win.rank, target, lock_type.value)


def unlock(win: Window, target: int) -> None:
    st = win.sync
    kind = st.locks.get(target)
    if kind is None:
        raise NotLocked(f"target {target} is not locked")
    f = win.fabric
    f.gsync_to(win.rank, win.owner_of(target))
    mon = _monitor(win)
    if mon is not None:
        mon.released(win.rank, target, kind)
    del st.locks[target]
    ldesc, loff = win.sync_loc(target, LOCAL_LOCK)
    if kind == LockType.SHARED.value:
        f.fadd64(win.rank, ldesc, loff, -1)
        return
    f.fadd64(win.rank, ldesc, loff, -WRITER)
    st.exclusive_held -= 1
    if st.exclusive_held == 0:
        gdesc, goff = win.sync_loc(0, GLOBAL_LOCK)
        f.fadd64(win.rank, gdesc, goff, -1)


def lock_all(win: Window) -> None:
    """Shared access to every target; excludes exclusive locks anywhere."""
    st = win.sync
    if st.lock_all or st.locks:
        raise AlreadyLocked("lock_all while holding locks")
    if st.access is not None or st.exposure is not None:
        raise EpochConflict("lock_all inside an active-target epoch")
    f = win.fabric
    gdesc, goff = win.sync_loc(0, GLOBAL_LOCK)
    spin = f.sched.spinner()
    while True:
        old = f.fadd64(win.rank, gdesc, goff, ALL_UNIT)
        if old & M32 == 0:
            break
        old = f.fadd64(win.rank, gdesc, goff, -ALL_UNIT)
        seen = f.observe(gdesc)
        if old & M32:
            spin.backoff((f.wait_key(gdesc),), seen)
    st.lock_all = True
    mon = _monitor(win)
    if mon is not None:
        mon.acquired(win.rank, None, "all")


def unlock_all(win: Window) -> None:
    st = win.sync
    if not st.lock_all:
        raise NotLocked("unlock_all without lock_all")
    f = win.fabric
    f.gsync(win.rank)
    mon = _monitor(win)
    if mon is not None:
        mon.released(win.rank, None, "all")
    st.lock_all = False
    gdesc, goff = win.sync_loc(0, GLOBAL_LOCK)
    f.fadd64(win.rank, gdesc, goff, -ALL_UNIT)


# -- flushes -------------------------------------------------------------------


def _require_passive(win: Window, target: int | None) -> None:
    st = win.sync
    if st.lock_all:
        return
    if target is None and st.locks:
        return
    if target is not None and target in st.locks:
        return
    raise NoPassiveEpoch("flush outside a passive-target epoch")


def flush(win: Window, target: int) -> None:
    """Remote completion of everything issued to ``target``."""
    _require_passive(win, target)
    win.fabric.gsync_to(win.rank, win.owner_of(target))


def flush_local(win: Window, target: int) -> None:
    # local completion is implied by remote completion on this fabric
    flush(win, target)


def flush_all(win: Window) -> None:
    _require_passive(win, None)
    win.fabric.gsync(win.rank)


def flush_local_all(win: Window) -> None:
    flush_all(win)


def win_sync(win: Window) -> None:
    """Ordering point between direct load/store and RMA on shared memory.

    Direct accesses on the simulated node are immediately visible, so this
    issues nothing.
    """


# -- accumulate lock (used by the fallback accumulate path) ---------------------


def acc_lock(win: Window, target: int) -> None:
    f = win.fabric
    desc, off = win.sync_loc(target, ACC_LOCK)
    spin = None
    while f.cas64(win.rank, desc, off, 0, 1) != 0:
        if spin is None:
            spin = f.sched.spinner()
        spin.backoff((f.wait_key(desc),), f.observe(desc))


def acc_unlock(win: Window, target: int) -> None:
    f = win.fabric
    desc, off = win.sync_loc(target, ACC_LOCK)
    f.gsync_to(win.rank, win.owner_of(target))
    f.put(win.rank, desc, off, _Q.pack(0))
    f.gsync_to(win.rank, desc.owner)
