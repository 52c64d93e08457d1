"""Motif applications built on the RMA layers."""

from .dsde import DsdeBaseline, DsdeExchange, run_dsde
from .hashtable import DistributedHashtable, run_hashtable

__all__ = ["DistributedHashtable", "DsdeBaseline", "DsdeExchange", "run_dsde", "run_hashtable"]
