"""Window creation protocols and remote address resolution.

Every window rank owns a registered *sync block* of 8-byte words used by
the synchronization layer (lock words, completion counter, matching ring)
followed, for dynamic windows, by the attached-region table. Where the
sync block lives depends on the window kind:

========== =============================== ===================================
kind        data addressing                 per-rank remote state
========== =============================== ===================================
TRADITIONAL table of p (key, addr, size,    Theta(p)
            disp_unit, sync key) rows
ALLOCATED   one symmetric key; sync block   O(1)
            then data at the same address
DYNAMIC     descriptor cache validated by   O(1) + cached regions
            the target's id counter
SHARED      one node-local segment with a   O(1)
            header of (offset, size) pairs
========== =============================== ===================================
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from .collectives import CollectiveContext, ReduceOp
from .errors import (
    AddressNotAttached,
    DetachUnknownRegion,
    EpochStillOpen,
    GroupSpansNodes,
    MatchingListOverflow,
    OutOfBounds,
    OverlappingRegion,
    RegistrationLimit,
    RetryLimitExceeded,
)
from .fabric import PAGE, AddressSpace, Fabric, RemoteDescriptor, Segment, symmetric_key

M32 = (1 << 32) - 1
_Q = struct.Struct("<q")

# sync block word indices
LOCAL_LOCK = 0
GLOBAL_LOCK = 1
COMPLETION = 2
MATCH = 3  # (head << 32) | tail of the matching ring
ACC_LOCK = 4
DYN_ID = 5
DYN_COUNT = 6
NOTIFY = 7  # (head << 32) | tail of the detach-notification ring
INVALIDATED = 8
HEADER_WORDS = 9


class WindowKind(str, enum.Enum):
    TRADITIONAL = "traditional"
    ALLOCATED = "allocated"
    DYNAMIC = "dynamic"
    SHARED = "shared"


@dataclass(frozen=True)
class WindowConfig:
    k_max: int = 8
    matching_capacity: int | None = None  # default 16 * k_max
    max_dynamic_regions: int = 64
    dynamic_notify: bool = False
    notify_capacity: int = 64
    alloc_max_attempts: int = 64
    acc_accel_max_elems: int = 64

    @property
    def capacity(self) -> int:
        return self.matching_capacity or 16 * self.k_max


@dataclass
class SyncState:
    fence_open: bool = False
    access: tuple[int, ...] | None = None
    exposure: tuple[int, ...] | None = None
    locks: dict[int, str] = field(default_factory=dict)
    exclusive_held: int = 0
    lock_all: bool = False

    @property
    def passive_open(self) -> bool:
        return self.lock_all or bool(self.locks)

    @property
    def any_open(self) -> bool:
        return self.passive_open or self.access is not None or self.exposure is not None


@dataclass
class _CacheEntry:
    cached_id: int
    regions: list[tuple[int, int, int]]  # (address, length, key)


class Window:
    """One rank's handle on a window. Targets are indices into ``members``."""

    def __init__(self, kind: WindowKind, ctx: CollectiveContext, size: int, disp_unit: int,
                 config: WindowConfig):
        self.kind = kind
        self.ctx = ctx
        self.fabric: Fabric = ctx.fabric
        self.rank = ctx.rank
        self.me = ctx.me
        self.members = ctx.members
        self.n = ctx.n
        self.size = size
        self.disp_unit = disp_unit
        self.config = config
        self.sync = SyncState()
        self.freed = False
        self.capacity = config.capacity
        self.slots_off = 8 * HEADER_WORDS
        self.dyn_off = self.slots_off + 8 * self.capacity
        dyn_words = 3 * config.max_dynamic_regions + config.notify_capacity if kind is WindowKind.DYNAMIC else 0
        self.notify_off = self.dyn_off + 24 * config.max_dynamic_regions
        self.sync_bytes = self.dyn_off + 8 * dyn_words
        self.memory: np.ndarray | None = None
        self.alloc_rounds = 0
        # kind specific
        self._table: np.ndarray | None = None
        self._node_table: np.ndarray | None = None
        self._template: RemoteDescriptor | None = None
        self._own_sync: RemoteDescriptor | None = None
        self._own_data: RemoteDescriptor | None = None
        self._segment: Segment | None = None
        self._sync_seg: Segment | None = None
        self._cache: dict[int, _CacheEntry] = {}
        self._attached: dict[int, tuple[Segment, RemoteDescriptor]] = {}
        self._notify_seen = 0
        self._notify_registered: set[int] = set()
        self._shared_offset = 0
        self._shared_sync_base = 0
        self._owns_base = False

    # -- addressing --------------------------------------------------------

    def owner_of(self, target: int) -> int:
        """World rank whose memory holds ``target``'s window data."""
        if self.kind is WindowKind.SHARED:
            return self._template.owner
        return self.members[target]

    def _check_target(self, target: int) -> None:
        if not 0 <= target < self.n:
            raise ValueError(f"target {target} outside window group of {self.n}")

    def sync_loc(self, target: int, word: int) -> tuple[RemoteDescriptor, int]:
        """Descriptor and byte offset of ``word`` in ``target``'s sync block."""
        if self.kind is WindowKind.TRADITIONAL:
            row = self._table[target]
            owner = self.members[target]
            desc = RemoteDescriptor(owner, int(row[4]), self.sync_bytes,
                                    self.fabric.node_of(owner), 0)
            return desc, 8 * word
        if self.kind is WindowKind.SHARED:
            return self._template, self._shared_sync_base + target * self.sync_bytes + 8 * word
        owner = self.members[target]
        if owner == self.rank:
            return self._template, 8 * word
        return self._template.for_owner(owner, self.fabric.node_of(owner)), 8 * word

    def sync_slot(self, target: int, index: int) -> tuple[RemoteDescriptor, int]:
        desc, off = self.sync_loc(target, 0)
        return desc, off + self.slots_off + 8 * (index % self.capacity)

    def data_loc(self, target: int, byte_offset: int, nbytes: int) -> tuple[RemoteDescriptor, int]:
        """Descriptor and offset for ``nbytes`` at ``byte_offset`` of ``target``'s window."""
        self._check_target(target)
        kind = self.kind
        if kind is WindowKind.DYNAMIC:
            return resolve_dynamic(self, target, byte_offset, nbytes)
        if byte_offset < 0:
            raise OutOfBounds(f"negative displacement {byte_offset}")
        if kind is WindowKind.TRADITIONAL:
            row = self._table[target]
            size = int(row[2])
            if byte_offset + nbytes > size:
                raise OutOfBounds(f"[{byte_offset}, {byte_offset + nbytes}) outside {size}-byte window of {target}")
            owner = self.members[target]
            return RemoteDescriptor(owner, int(row[0]), size, self.fabric.node_of(owner), int(row[1])), byte_offset
        if kind is WindowKind.ALLOCATED:
            owner = self.members[target]
            desc = self._template if owner == self.rank else self._template.for_owner(owner, self.fabric.node_of(owner))
            if target == self.me and byte_offset + nbytes > self.size:
                raise OutOfBounds(f"[{byte_offset}, {byte_offset + nbytes}) outside own {self.size}-byte window")
            return desc, self.sync_bytes + byte_offset
        base, size = self._shared_entry(target)
        if byte_offset + nbytes > size:
            raise OutOfBounds(f"[{byte_offset}, {byte_offset + nbytes}) outside {size}-byte segment of {target}")
        return self._template, base + byte_offset

    def _shared_entry(self, target: int) -> tuple[int, int]:
        f = self.fabric
        off = f.load64(self.rank, self._template, 16 * target)
        size = f.load64(self.rank, self._template, 16 * target + 8)
        return off, size

    # -- views and accounting ------------------------------------------------

    def array(self, dtype=np.uint8) -> np.ndarray:
        """Local window memory as a typed numpy view."""
        return self.memory.view(dtype)

    def state_breakdown(self) -> dict[str, int]:
        """Persistent per-rank bytes held for this window."""
        out = {"descriptor": 64, "sync_block": 8 * HEADER_WORDS,
               "matching_list": 8 * self.capacity}
        if self._table is not None:
            out["remote_table"] = int(self._table.nbytes)
        if self._node_table is not None:
            out["node_table"] = int(self._node_table.nbytes)
        if self.kind is WindowKind.DYNAMIC:
            out["region_table"] = 24 * len(self._attached)
            out["cache"] = sum(16 + 24 * len(e.regions) for e in self._cache.values())
        return out

    def state_bytes(self) -> int:
        return sum(self.state_breakdown().values())

    def __repr__(self):
        return f"Window({self.kind.value}, rank={self.rank}, size={self.size})"


# -- creation -------------------------------------------------------------


def _node_ctx(ctx: CollectiveContext) -> CollectiveContext:
    cached = getattr(ctx, "_node_ctx", None)
    if cached is None:
        cached = ctx.split_by_node()
        ctx._node_ctx = cached
    return cached


def win_create(ctx: CollectiveContext, base: Segment | None, size: int, disp_unit: int = 1,
               config: WindowConfig | None = None) -> Window:
    """Expose existing memory ``base`` (allocated when None) in place."""
    if size < 0:
        raise ValueError("window size must be >= 0")
    f = ctx.fabric
    win = Window(WindowKind.TRADITIONAL, ctx, size, disp_unit, config or WindowConfig())
    data_key = 0
    address = 0
    if size:
        if base is None:
            base = f.alloc(ctx.rank, size)
            win._owns_base = True
        elif base.length < size:
            raise OutOfBounds("base segment smaller than window size")
        data = f.register_segment(ctx.rank, base)
        data_key, address = data.key, data.address
        win._own_data = data
        win._segment = base
        win.memory = base.view()[:size]
    win._own_sync = f.register(ctx.rank, win.sync_bytes)
    win._sync_seg = f.segment(win._own_sync)
    table = ctx.allgather_ints([data_key, address, size, disp_unit, win._own_sync.key])
    node = _node_ctx(ctx)
    win._node_table = node.allgather_ints([address, size])
    win._table = np.array(table)
    return win


def _negotiate_symmetric(ctx: CollectiveContext, length: int, config: WindowConfig,
                         win: Window) -> tuple[Segment, RemoteDescriptor]:
    """Leader proposes a random address until every member can reserve it."""
    f = ctx.fabric
    rng = f.rng(ctx.rank)
    lo = AddressSpace.LOW // PAGE + 1
    hi = AddressSpace.HIGH // PAGE - (length // PAGE + 2)
    for attempt in range(config.alloc_max_attempts):
        win.alloc_rounds = attempt + 1
        proposal = struct.pack("<q", rng.randrange(lo, hi) * PAGE) if ctx.me == 0 else None
        (addr,) = struct.unpack("<q", ctx.broadcast(0, proposal, 8))
        seg = f.alloc(ctx.rank, length, address=addr)
        desc = None
        if seg is not None:
            try:
                desc = f.register_segment(ctx.rank, seg, key=symmetric_key("sym", addr))
            except (ValueError, RegistrationLimit):
                f.free(seg)
                seg = None
        if ctx.allreduce(seg is not None, ReduceOp.AND):
            return seg, desc
        if seg is not None:
            f.deregister(ctx.rank, desc)
    raise RetryLimitExceeded(f"no common address after {config.alloc_max_attempts} attempts")


def win_allocate(ctx: CollectiveContext, size: int, disp_unit: int = 1,
                 config: WindowConfig | None = None) -> Window:
    """Allocate window memory at the same address on every member."""
    if size < 0:
        raise ValueError("window size must be >= 0")
    win = Window(WindowKind.ALLOCATED, ctx, size, disp_unit, config or WindowConfig())
    seg, desc = _negotiate_symmetric(ctx, win.sync_bytes + size, win.config, win)
    win._segment = seg
    win._template = desc
    win._own_sync = desc
    win.memory = seg.view()[win.sync_bytes:win.sync_bytes + size]
    return win


def win_create_dynamic(ctx: CollectiveContext, config: WindowConfig | None = None) -> Window:
    """Window without memory; regions come and go with attach/detach."""
    win = Window(WindowKind.DYNAMIC, ctx, 0, 1, config or WindowConfig())
    seg, desc = _negotiate_symmetric(ctx, win.sync_bytes, win.config, win)
    win._segment = seg
    win._template = desc
    win._own_sync = desc
    return win


def win_allocate_shared(ctx: CollectiveContext, size: int, disp_unit: int = 1,
                        config: WindowConfig | None = None) -> Window:
    """One node-local allocation carved into contiguous per-rank segments."""
    f = ctx.fabric
    if size < 0:
        raise ValueError("window size must be >= 0")
    win = Window(WindowKind.SHARED, ctx, size, disp_unit, config or WindowConfig())
    nodes = ctx.allreduce(np.array([f.node_of(ctx.rank), -f.node_of(ctx.rank)]), ReduceOp.MAX)
    if nodes[0] != -nodes[1]:
        raise GroupSpansNodes("shared windows need every member on one node")
    sizes = ctx.allgather_ints([size])[:, 0]
    header = 16 * ctx.n
    sync_base = header
    data_base = sync_base + ctx.n * win.sync_bytes
    offsets = data_base + np.concatenate([[0], np.cumsum((sizes + 7) // 8 * 8)[:-1]]).astype(np.int64)
    total = int(data_base + ((sizes + 7) // 8 * 8).sum())
    if ctx.me == 0:
        seg = f.alloc(ctx.rank, total)
        desc = f.register_segment(ctx.rank, seg)
        hdr = seg.view(np.int64)[:2 * ctx.n]
        hdr[0::2] = offsets
        hdr[1::2] = sizes
        rec = struct.pack("<4q", desc.owner, desc.key, desc.length, desc.address)
    else:
        rec = None
        seg = None
    owner, key, length, address = struct.unpack("<4q", ctx.broadcast(0, rec, 32))
    win._template = RemoteDescriptor(owner, key, length, f.node_of(owner), address)
    win._segment = seg
    win._shared_sync_base = sync_base
    win._shared_offset = int(offsets[ctx.me])
    view = f.local_view(ctx.rank, win._template)
    win.memory = view[win._shared_offset:win._shared_offset + size]
    return win


def win_shared_query(win: Window, target: int) -> tuple[int, int]:
    """(address, size) of ``target``'s segment, readable by direct load."""
    off, size = win._shared_entry(target)
    return win._template.address + off, size


def shared_view(win: Window, target: int, dtype=np.uint8) -> np.ndarray:
    off, size = win._shared_entry(target)
    view = win.fabric.local_view(win.rank, win._template)
    return view[off:off + size].view(dtype)


def win_free(win: Window) -> None:
    """Collective; releases every registration the window made."""
    if win.sync.any_open:
        raise EpochStillOpen(f"{win} still has an open epoch: {win.sync}")
    f = win.fabric
    win.ctx.barrier()
    if win.kind is WindowKind.TRADITIONAL:
        if win._own_data is not None:
            f.deregister(win.rank, win._own_data, release=win._owns_base)
        f.deregister(win.rank, win._own_sync)
    elif win.kind is WindowKind.SHARED:
        if win._segment is not None:
            f.deregister(win.rank, win._template)
    else:
        for seg, desc in list(win._attached.values()):
            f.deregister(win.rank, desc, release=False)
        win._attached.clear()
        f.deregister(win.rank, win._template)
    win.freed = True
    win.memory = None


# -- dynamic windows --------------------------------------------------------------


def _dyn_words(win: Window) -> np.ndarray:
    return win.fabric.local_view(win.rank, win._own_sync, np.int64)


def _dyn_entries(win: Window) -> np.ndarray:
    words = _dyn_words(win)
    start = win.dyn_off // 8
    return words[start:start + 3 * win.config.max_dynamic_regions].reshape(-1, 3)


def win_attach(win: Window, base: Segment | int) -> Segment:
    """Register a local region (a segment, or a byte count to allocate) and publish it."""
    f = win.fabric
    if isinstance(base, int):
        base = f.alloc(win.rank, base)
    lo, hi = base.address, base.address + base.length
    for seg, _ in win._attached.values():
        if lo < seg.address + seg.length and seg.address < hi:
            raise OverlappingRegion(f"[{lo:#x}, {hi:#x}) overlaps an attached region")
    if len(win._attached) >= win.config.max_dynamic_regions:
        raise RegistrationLimit("dynamic region table is full")
    desc = f.register_segment(win.rank, base)
    count = len(win._attached)
    _dyn_entries(win)[count] = (base.address, base.length, desc.key)
    win._attached[base.address] = (base, desc)
    f.store64(win.rank, win._own_sync, 8 * DYN_COUNT, count + 1)
    f.local_fadd64(win.rank, win._own_sync, 8 * DYN_ID, 1)
    return base


def win_detach(win: Window, base: Segment | int) -> None:
    f = win.fabric
    address = base.address if isinstance(base, Segment) else base
    if address not in win._attached:
        raise DetachUnknownRegion(f"no region attached at {address:#x}")
    if win.config.dynamic_notify:
        _notify_cachers(win)
    # invalidate first: a reader that saw the old id may still be in flight
    f.local_fadd64(win.rank, win._own_sync, 8 * DYN_ID, 1)
    seg, desc = win._attached.pop(address)
    entries = _dyn_entries(win)
    old_count = len(win._attached) + 1
    rows = [r.copy() for r in entries[:old_count] if int(r[0]) != address]
    entries[:old_count] = 0
    for i, r in enumerate(rows):
        entries[i] = r
    _dyn_words(win)[DYN_COUNT] = len(rows)
    f.deregister(win.rank, desc, release=False)


def _get_words(win: Window, desc: RemoteDescriptor, offset: int, nwords: int) -> np.ndarray:
    f = win.fabric
    buf = np.zeros(nwords, dtype=np.int64)
    if nwords:
        f.wait(win.rank, f.get(win.rank, desc, offset, buf))
    return buf


def _fetch_regions(win: Window, target: int) -> _CacheEntry:
    desc, base = win.sync_loc(target, 0)
    while True:
        id1 = int(_get_words(win, desc, base + 8 * DYN_ID, 1)[0])
        count = int(_get_words(win, desc, base + 8 * DYN_COUNT, 1)[0])
        rows = _get_words(win, desc, base + win.dyn_off, 3 * count).reshape(-1, 3)
        id2 = int(_get_words(win, desc, base + 8 * DYN_ID, 1)[0])
        if id1 == id2:
            return _CacheEntry(id1, [tuple(int(x) for x in r) for r in rows])


def _lookup(win: Window, target: int, entry: _CacheEntry, addr: int, nbytes: int):
    owner = win.members[target]
    for a, ln, key in entry.regions:
        if a <= addr and addr + nbytes <= a + ln:
            return RemoteDescriptor(owner, key, ln, win.fabric.node_of(owner), a), addr - a
    return None


def resolve_dynamic(win: Window, target: int, addr: int, nbytes: int) -> tuple[RemoteDescriptor, int]:
    """Find the registration covering ``[addr, addr + nbytes)`` at ``target``."""
    if win.config.dynamic_notify:
        return _resolve_notify(win, target, addr, nbytes)
    entry = win._cache.get(target)
    if entry is not None:
        desc, base = win.sync_loc(target, 0)
        current = int(_get_words(win, desc, base + 8 * DYN_ID, 1)[0])
        if current != entry.cached_id:
            entry = None
    if entry is None:
        entry = _fetch_regions(win, target)
        win._cache[target] = entry
    hit = _lookup(win, target, entry, addr, nbytes)
    if hit is None:
        raise AddressNotAttached(f"[{addr:#x}, +{nbytes}) is not attached at target {target}")
    return hit


# Optimized variant: targets keep a ring of ranks caching their table and
# bump each cacher's INVALIDATED word before a detach.

def _resolve_notify(win: Window, target: int, addr: int, nbytes: int):
    f = win.fabric
    seen = f.load64(win.rank, win._own_sync, 8 * INVALIDATED)
    if seen != win._notify_seen:
        win._cache.clear()
        win._notify_registered.clear()
        win._notify_seen = seen
    entry = win._cache.get(target)
    hit = _lookup(win, target, entry, addr, nbytes) if entry is not None else None
    if hit is not None:
        return hit
    if target not in win._notify_registered:
        desc, base = win.sync_loc(target, 0)
        v = f.fadd64(win.rank, desc, base + 8 * NOTIFY, 1)
        tail, head = v & M32, (v >> 32) & M32
        if tail - head >= win.config.notify_capacity:
            raise MatchingListOverflow(f"notification ring of target {target} is full")
        slot = base + win.notify_off + 8 * (tail % win.config.notify_capacity)
        f.put(win.rank, desc, slot, _Q.pack(win.me + 1))
        f.gsync_to(win.rank, desc.owner)
        win._notify_registered.add(target)
    entry = _fetch_regions(win, target)
    win._cache[target] = entry
    hit = _lookup(win, target, entry, addr, nbytes)
    if hit is None:
        raise AddressNotAttached(f"[{addr:#x}, +{nbytes}) is not attached at target {target}")
    return hit


def _notify_cachers(win: Window) -> None:
    f = win.fabric
    own = win._own_sync
    cap = win.config.notify_capacity
    spin = None
    while True:
        v = f.load64(win.rank, own, 8 * NOTIFY)
        tail, head = v & M32, (v >> 32) & M32
        slots = [f.load64(win.rank, own, win.notify_off + 8 * (i % cap)) for i in range(head, tail)]
        if all(slots):
            break
        if spin is None:
            spin = f.sched.spinner()
        spin.wait((f.wait_key(own),))
    for who in slots:
        peer = win.members[who - 1]
        if peer == win.rank:
            f.local_fadd64(win.rank, own, 8 * INVALIDATED, 1)
        else:
            f.fadd64(win.rank, own.for_owner(peer, f.node_of(peer)), 8 * INVALIDATED, 1)
    words = _dyn_words(win)
    for i in range(head, tail):
        words[(win.notify_off // 8) + i % cap] = 0
    if tail > head:
        f.local_fadd64(win.rank, own, 8 * NOTIFY, (tail - head) << 32)
