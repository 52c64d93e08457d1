"""One-sided RMA protocols over a simulated RDMA fabric."""

from . import bench, collectives, comm, datatype, sync, verify, window
from .collectives import CollectiveContext, ReduceOp
from .comm import AccOp
from .errors import WindlassError
from .fabric import Fabric, FabricConfig, Mode
from .sync import LockType
from .window import Window, WindowConfig, WindowKind

__version__ = "0.1.0"

__all__ = [
    "AccOp",
    "CollectiveContext",
    "Fabric",
    "FabricConfig",
    "LockType",
    "Mode",
    "ReduceOp",
    "Window",
    "WindowConfig",
    "WindowKind",
    "WindlassError",
    "bench",
    "collectives",
    "comm",
    "datatype",
    "sync",
    "verify",
    "window",
]
