"""Exception hierarchy shared by every layer."""


class WindlassError(Exception):
    """Base class for all library errors."""


# fabric
class ZeroLength(WindlassError):
    pass


class RegistrationLimit(WindlassError):
    pass


class OutOfBounds(WindlassError):
    pass


class StaleDescriptor(WindlassError):
    pass


class Misaligned(WindlassError):
    pass


class ForeignHandle(WindlassError):
    pass


class Deadlock(WindlassError):
    """Every live rank is blocked and no pending operation can make progress."""


class Livelock(WindlassError):
    """A scheduled run exceeded its step budget without finishing."""


# collectives
class ProtocolError(WindlassError):
    pass


# window
class RetryLimitExceeded(WindlassError):
    pass


class OverlappingRegion(WindlassError):
    pass


class DetachUnknownRegion(WindlassError):
    pass


class AddressNotAttached(WindlassError):
    pass


class GroupSpansNodes(WindlassError):
    pass


class EpochStillOpen(WindlassError):
    pass


# sync
class EpochConflict(WindlassError):
    pass


class MatchingListOverflow(WindlassError):
    pass


class AlreadyLocked(WindlassError):
    pass


class NotLocked(WindlassError):
    pass


class NoPassiveEpoch(WindlassError):
    pass


# comm
class EpochViolation(WindlassError):
    pass


class TypeMismatch(WindlassError):
    pass


class UnsupportedType(WindlassError):
    pass


# apps
class HeapExhausted(WindlassError):
    pass


class CorruptChain(WindlassError):
    pass


class SlotOverflow(WindlassError):
    pass


# bench
class DegenerateFit(WindlassError):
    pass


class ModeMismatch(WindlassError):
    pass


class SafetyViolation(WindlassError):
    """Raised by ghost-state monitors when a protocol invariant is broken."""
