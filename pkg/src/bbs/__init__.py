"""Auditable big-file sharing over a permissioned ledger.

The package keeps large files off-chain and puts everything needed for a
chain of custody on-chain: registration records, per-session event
entities, key escrow hashes, and validity flags from endorsement-policy
and concurrency validation. A deterministic network simulator drives
whole consortia in one process for tests and benchmarks; the same node
code also runs over TCP sockets.

Importing the package registers every canonical wire type, so decoding
works regardless of which module a caller touches first.
"""

from __future__ import annotations

from . import (  # noqa: F401  (import for side effect: canonical registry)
    audit,
    bench,
    config,
    contract,
    encoding,
    errors,
    identity,
    ledger,
    netsim,
    node,
    offstate,
    pdc,
    session,
    topology,
    txflow,
)
from .audit import CustodyReport, audit_blocks, audit_file, export_chain
from .config import GenesisConfig, load_genesis, parse_genesis
from .errors import BbsError
from .session import SessionMode, SessionOutcome, SessionPlan, run_session, upload_file
from .topology import Topology, build_topology
from .txflow import TxValidity

__all__ = [
    "BbsError",
    "CustodyReport",
    "GenesisConfig",
    "SessionMode",
    "SessionOutcome",
    "SessionPlan",
    "Topology",
    "TxValidity",
    "audit_blocks",
    "audit_file",
    "build_topology",
    "export_chain",
    "load_genesis",
    "parse_genesis",
    "run_session",
    "upload_file",
]

__version__ = "0.1.0"
