"""Put, get and the accumulate family over a window.

Non-contiguous transfers are split into the fewest blocks that are
contiguous at both ends, one fabric operation per block. Basic-to-basic
transfers of matching type skip the decomposition.

Accumulates on INT64 with SUM or REPLACE and at most
``acc_accel_max_elems`` elements map onto the fabric's 8-byte atomics.
Everything else runs under the target's accumulate lock: fetch, apply
locally, write back. INT64 write-back uses CAS per element so it stays
atomic with respect to concurrent atomics on the same words.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field

import numpy as np

from . import sync as _sync
from .datatype import BYTE, FLOAT64, INT64, Basic, Datatype, decompose, flatten, gather_bytes
from .errors import EpochViolation, TypeMismatch, UnsupportedType
from .fabric import MASK64, GET, PUT, OpHandle, to_signed
from .window import Window

_Q = struct.Struct("<q")
_D = struct.Struct("<d")


class AccOp(str, enum.Enum):
    SUM = "sum"
    PROD = "prod"
    MIN = "min"
    MAX = "max"
    BAND = "band"
    BOR = "bor"
    BXOR = "bxor"
    REPLACE = "replace"
    NO_OP = "no_op"


_FLOAT_OK = {AccOp.SUM, AccOp.PROD, AccOp.MIN, AccOp.MAX, AccOp.REPLACE, AccOp.NO_OP}


def apply_op(op: AccOp, current: np.ndarray, operand: np.ndarray) -> np.ndarray:
    """Elementwise result of ``current op operand`` (int64 wraps)."""
    if op is AccOp.SUM:
        return current + operand
    if op is AccOp.PROD:
        return current * operand
    if op is AccOp.MIN:
        return np.minimum(current, operand)
    if op is AccOp.MAX:
        return np.maximum(current, operand)
    if op is AccOp.BAND:
        return current & operand
    if op is AccOp.BOR:
        return current | operand
    if op is AccOp.BXOR:
        return current ^ operand
    if op is AccOp.REPLACE:
        return operand.copy()
    return current.copy()


def _infer(buf) -> Basic:
    dt = getattr(buf, "dtype", None)
    if dt is None:
        return BYTE
    if dt == np.int64:
        return INT64
    if dt == np.float64:
        return FLOAT64
    return BYTE


def _bytes_view(buf) -> memoryview:
    if isinstance(buf, np.ndarray) and not buf.flags.c_contiguous:
        raise ValueError("origin buffers must be C-contiguous")
    return memoryview(buf).cast("B")


@dataclass
class Request:
    """Handle of a request-based operation."""

    handles: list[OpHandle] = field(default_factory=list)
    result: object = None


def _check_epoch(win: Window, target: int) -> None:
    st = win.sync
    if st.fence_open or st.lock_all or target in st.locks:
        return
    if st.access is not None and target in st.access:
        return
    raise EpochViolation(f"no epoch grants access to target {target}")


def _plan(win: Window, target: int, origin_buf, origin_dt, count, target_disp, target_dt, target_count):
    win._check_target(target)
    _check_epoch(win, target)
    odt = origin_dt or _infer(origin_buf)
    mv = _bytes_view(origin_buf)
    if count is None:
        count = len(mv) // odt.extent if odt.extent else 0
    tdt = target_dt or odt
    if target_count is None:
        target_count = count
    if isinstance(odt, Basic) and odt == tdt and count == target_count:
        blocks = [(0, 0, count * odt.size)] if count else []
    else:
        blocks = decompose(odt, count, tdt, target_count)
    need = (count - 1) * odt.extent + max((o + n for o, n in odt.blocks), default=0) if count else 0
    if need > len(mv):
        raise ValueError(f"origin buffer holds {len(mv)} bytes, datatype needs {need}")
    span = max((b[1] + b[2] for b in blocks), default=0)
    desc, base = win.data_loc(target, target_disp * win.disp_unit, span)
    return mv, blocks, desc, base


def put(win: Window, target: int, origin_buf, origin_dt: Datatype | None = None, count: int | None = None,
        target_disp: int = 0, target_dt: Datatype | None = None, target_count: int | None = None) -> list[OpHandle]:
    """Nonblocking write; completes at the next flush or synchronization."""
    mv, blocks, desc, base = _plan(win, target, origin_buf, origin_dt, count, target_disp, target_dt, target_count)
    f = win.fabric
    return [f.transfer(win.rank, PUT, desc, base + t, mv[o:o + n]) for o, t, n in blocks]


def get(win: Window, target: int, origin_buf, origin_dt: Datatype | None = None, count: int | None = None,
        target_disp: int = 0, target_dt: Datatype | None = None, target_count: int | None = None) -> list[OpHandle]:
    """Nonblocking read into ``origin_buf``."""
    mv, blocks, desc, base = _plan(win, target, origin_buf, origin_dt, count, target_disp, target_dt, target_count)
    if mv.readonly:
        raise ValueError("get needs a writable origin buffer")
    f = win.fabric
    return [f.transfer(win.rank, GET, desc, base + t, mv[o:o + n]) for o, t, n in blocks]


def rput(win: Window, target: int, origin_buf, *args, **kw) -> Request:
    return Request(put(win, target, origin_buf, *args, **kw))


def rget(win: Window, target: int, origin_buf, *args, **kw) -> Request:
    return Request(get(win, target, origin_buf, *args, **kw))


def request_wait(win: Window, req: Request):
    for h in req.handles:
        win.fabric.wait(win.rank, h)
    return req.result


def request_test(win: Window, req: Request) -> bool:
    return all(h.complete for h in req.handles)


# -- accumulate family ---------------------------------------------------------


def _elem_type(dt: Datatype) -> Basic:
    b = dt.basic
    if b is None or b not in (INT64, FLOAT64):
        raise UnsupportedType(f"accumulate supports INT64 and FLOAT64 elements, got {dt!r}")
    return b


def _acc_setup(win, target, origin_buf, origin_dt, count, target_disp, target_dt, op, fetching):
    win._check_target(target)
    _check_epoch(win, target)
    op = AccOp(op)
    if op is AccOp.NO_OP and not fetching:
        raise ValueError("NO_OP is only valid for fetching accumulates")
    odt = origin_dt or _infer(origin_buf)
    ebasic = _elem_type(odt)
    if count is None:
        count = len(_bytes_view(origin_buf)) // odt.extent if odt.extent else 0
    tdt = target_dt or odt
    if _elem_type(tdt) != ebasic:
        raise TypeMismatch(f"origin elements {ebasic!r} vs target {tdt.basic!r}")
    if op not in _FLOAT_OK and ebasic is FLOAT64:
        raise UnsupportedType(f"{op.value} is not defined on FLOAT64")
    nelem = odt.size * count // 8
    if tdt.size and nelem % (tdt.size // 8):
        raise TypeMismatch("target datatype does not tile the origin elements")
    tcount = nelem // (tdt.size // 8) if tdt.size else 0
    operand = np.frombuffer(gather_bytes(origin_buf, odt, count), dtype=ebasic.numpy).copy() \
        if nelem else np.zeros(0, dtype=ebasic.numpy)
    # byte offset of each target element, relative to target_disp
    offs = [o + 8 * k for o, n in flatten(tdt, tcount) for k in range(n // 8)]
    span = max(offs) + 8 if offs else 0
    desc, base = win.data_loc(target, target_disp * win.disp_unit, span)
    return op, ebasic, operand, [base + o for o in offs], desc


def _accelerated(win, op, ebasic, n) -> bool:
    return (ebasic is INT64 and op in (AccOp.SUM, AccOp.REPLACE, AccOp.NO_OP)
            and n <= win.config.acc_accel_max_elems)


def _atomic_one(win: Window, desc, off: int, op: AccOp, value: int) -> int:
    f = win.fabric
    if op is AccOp.SUM:
        return f.fadd64(win.rank, desc, off, int(value))
    if op is AccOp.NO_OP:
        return f.fadd64(win.rank, desc, off, 0)
    cur = 0
    while True:
        old = f.cas64(win.rank, desc, off, cur, int(value))
        if old == cur:
            return old
        cur = old


def _locked_apply(win: Window, target: int, desc, offs: list[int], op: AccOp,
                  ebasic: Basic, operand: np.ndarray) -> np.ndarray:
    """Fetch, combine and write back under the target's accumulate lock."""
    f = win.fabric
    rank = win.rank
    _sync.acc_lock(win, target)
    try:
        raw = np.zeros(len(offs), dtype=np.int64)
        hs = [f.transfer(rank, GET, desc, o, raw[i:i + 1]) for i, o in enumerate(offs)] \
            if not _is_run(offs) else ([f.transfer(rank, GET, desc, offs[0], raw)] if offs else [])
        for h in hs:
            f.wait(rank, h)
        old = raw.view(ebasic.numpy).copy()
        if op is AccOp.NO_OP:
            return old
        if ebasic is INT64:
            for i, o in enumerate(offs):
                cur = int(old[i])
                while True:
                    new = int(apply_op(op, np.array([cur], np.int64), operand[i:i + 1])[0])
                    seen = f.cas64(rank, desc, o, cur, new)
                    if seen == cur:
                        break
                    cur = seen
                old[i] = cur
        else:
            new = apply_op(op, old, operand).astype(np.float64)
            if _is_run(offs):
                f.transfer(rank, PUT, desc, offs[0], new)
            else:
                for i, o in enumerate(offs):
                    f.transfer(rank, PUT, desc, o, new[i:i + 1])
        return old
    finally:
        _sync.acc_unlock(win, target)


def _is_run(offs: list[int]) -> bool:
    return all(b - a == 8 for a, b in zip(offs, offs[1:]))


def _accumulate(win, target, origin_buf, origin_dt, count, target_disp, target_dt, op, fetching):
    op, ebasic, operand, offs, desc = _acc_setup(
        win, target, origin_buf, origin_dt, count, target_disp, target_dt, op, fetching)
    if not offs:
        return np.zeros(0, dtype=ebasic.numpy)
    if _accelerated(win, op, ebasic, len(offs)):
        return np.array([_atomic_one(win, desc, o, op, v) for o, v in zip(offs, operand)], dtype=np.int64)
    return _locked_apply(win, target, desc, offs, op, ebasic, operand)


def accumulate(win: Window, target: int, origin_buf, origin_dt: Datatype | None = None, count: int | None = None,
               target_disp: int = 0, target_dt: Datatype | None = None, op: AccOp | str = AccOp.SUM) -> None:
    """Elementwise atomic ``target = target op origin``."""
    _accumulate(win, target, origin_buf, origin_dt, count, target_disp, target_dt, op, False)


def get_accumulate(win: Window, target: int, origin_buf, result_buf, origin_dt: Datatype | None = None,
                   count: int | None = None, target_disp: int = 0, target_dt: Datatype | None = None,
                   op: AccOp | str = AccOp.SUM) -> None:
    """Like ``accumulate`` but stores the previous target values in ``result_buf``."""
    old = _accumulate(win, target, origin_buf, origin_dt, count, target_disp, target_dt, op, True)
    out = np.asarray(result_buf).reshape(-1)
    out[:len(old)] = old


def fetch_and_op(win: Window, target: int, value, target_disp: int = 0, op: AccOp | str = AccOp.SUM,
                 dtype: Basic = INT64):
    """Single-element get_accumulate; returns the previous value."""
    buf = np.array([value], dtype=dtype.numpy)
    old = _accumulate(win, target, buf, dtype, 1, target_disp, dtype, op, True)
    return old[0].item()


def compare_and_swap(win: Window, target: int, compare, swap, target_disp: int = 0, dtype: Basic = INT64):
    """Returns the previous value; writes ``swap`` when it equalled ``compare``."""
    win._check_target(target)
    _check_epoch(win, target)
    if dtype not in (INT64, FLOAT64):
        raise UnsupportedType(f"compare_and_swap supports INT64 and FLOAT64, got {dtype!r}")
    desc, off = win.data_loc(target, target_disp * win.disp_unit, 8)
    f = win.fabric
    if dtype is INT64:
        return f.cas64(win.rank, desc, off, int(compare), int(swap))
    bits = lambda x: to_signed(_Q.unpack(_D.pack(float(x)))[0])
    _sync.acc_lock(win, target)
    try:
        old = f.cas64(win.rank, desc, off, bits(compare) & MASK64, bits(swap))
    finally:
        _sync.acc_unlock(win, target)
    return _D.unpack(_Q.pack(old))[0]


def raccumulate(win: Window, target: int, origin_buf, *args, **kw) -> Request:
    accumulate(win, target, origin_buf, *args, **kw)
    return Request()


def rget_accumulate(win: Window, target: int, origin_buf, result_buf, *args, **kw) -> Request:
    get_accumulate(win, target, origin_buf, result_buf, *args, **kw)
    return Request(result=result_buf)
