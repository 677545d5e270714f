"""Benchmark harness: parallel-session and buffer-size latency sweeps.

Each run builds a fresh topology, registers one deterministic fixture
file, drives P concurrent sessions, and emits one row per session with
the four per-phase latencies plus the whole-session latency. Rows are
appended to a tab-separated results file as they are produced, so an
aborted sweep keeps everything finished so far.

Under the simulated transport all latencies are virtual-clock readings,
which makes result tables bit-identical across runs with the same seed.
After every run the harness replays each peer's persisted chain from
genesis and requires the replayed state digest to equal the live one.
"""

from __future__ import annotations

import random
import statistics
import tempfile
from dataclasses import dataclass
from pathlib import Path

from .config import GenesisConfig, parse_genesis
from .errors import BbsError
from .ledger import Block, WorldState, apply_block, read_chain_file
from .netsim import LinkParams
from .session import SessionPlan, run_parallel_sessions, upload_file
from .topology import Topology, build_topology

# Link used for bandwidth-sensitive runs: slow enough that a 16 MB
# transfer dominates a session, so parallel sessions visibly queue.
BENCH_LINK = LinkParams(bandwidth_bps=25 * 1_000_000, latency_us=1000)

FIXTURE_SIZES = {"1mb": 1 << 20, "16mb": 16 << 20, "64mb": 64 << 20}

_COLUMNS = (
    "label",
    "transport",
    "file_bytes",
    "buffer_bytes",
    "parallel",
    "rep",
    "session",
    "request_ms",
    "transfer_ms",
    "keyaccess_ms",
    "decrypt_ms",
    "session_ms",
)


@dataclass(frozen=True)
class BenchRow:
    label: str
    transport: str
    file_bytes: int
    buffer_bytes: int
    parallel: int
    rep: int
    session: int
    request_ms: int
    transfer_ms: int
    keyaccess_ms: int
    decrypt_ms: int
    session_ms: int

    def rendered(self) -> str:
        return "\t".join(str(getattr(self, c)) for c in _COLUMNS)


def fixture_bytes(size: int, seed: str) -> bytes:
    """Deterministic pseudo-random fixture content."""
    return random.Random(f"bbs-fixture/{seed}/{size}").randbytes(size)


def bench_genesis(seed: str, *, transport: str = "sim", batch_size: int = 10,
                  batch_timeout_ms: int = 200) -> GenesisConfig:
    """Three-org reference topology: owner, receiver, bystander."""
    return parse_genesis(
        {
            "channel": "filechannel",
            "seed": seed,
            "transport": transport,
            "orderer": {
                "batch_size": batch_size,
                "batch_timeout_ms": batch_timeout_ms,
            },
            "orgs": [
                {
                    "name": "Org1",
                    "peers": ["peer0"],
                    "clients": ["client0"],
                    "orderers": ["orderer0"],
                },
                {"name": "Org2", "peers": ["peer0"], "clients": ["client0"]},
                {"name": "Org3", "peers": ["peer0"], "clients": ["client0"]},
            ],
            "contract": {
                "default_policy": "AND(Org1,Org2)",
            },
        }
    )


def replay_digest(blocks: list[Block]) -> bytes:
    state = WorldState()
    for block in blocks:
        apply_block(state, block)
    return state.digest()


def check_replay(topo: Topology) -> None:
    """Replaying every peer's persisted chain must reproduce its live state."""
    for org, core in topo.peers.items():
        persisted = read_chain_file(core.data_dir / "chain.bin")
        replayed = replay_digest(persisted)
        live = core.world_digest()
        if replayed != live:
            raise BbsError(f"{org}: replayed state digest diverges from live state")


def _append_rows(path: Path | None, rows: list[BenchRow]) -> None:
    if path is None:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fresh = not path.exists() or path.stat().st_size == 0
    with open(path, "a", encoding="utf-8") as handle:
        if fresh:
            handle.write("\t".join(_COLUMNS) + "\n")
        for row in rows:
            handle.write(row.rendered() + "\n")


def run_bench(
    workdir: Path,
    *,
    file_size: int,
    parallelism: int,
    reps: int = 1,
    buffer_size: int = 0,
    seed: str = "bench",
    transport: str = "sim",
    link: LinkParams = BENCH_LINK,
    label: str = "bench",
    out_path: Path | None = None,
) -> list[BenchRow]:
    """Run ``reps`` independent repetitions of P parallel sessions."""
    rows: list[BenchRow] = []
    for rep in range(reps):
        rep_seed = f"{seed}/rep{rep}"
        config = bench_genesis(rep_seed, transport=transport)
        # A fresh directory per run: reusing one would trigger chain recovery
        # and reject the rerun's proposals as nonce replays.
        Path(workdir).mkdir(parents=True, exist_ok=True)
        run_dir = Path(
            tempfile.mkdtemp(prefix=f"{label}-p{parallelism}-r{rep}-", dir=workdir)
        )
        topo = build_topology(config, run_dir)
        try:
            if topo.sim_transport is not None:
                topo.set_peer_link("Org1", "Org2", link)
                topo.set_peer_link("Org2", "Org1", link)
            data = fixture_bytes(file_size, rep_seed)
            topo.call(upload_file, topo, "Org1", "fixture.bin", data, ["Org2"])
            plan = SessionPlan(
                "fixture.bin",
                "Org1",
                "Org2",
                parallelism=parallelism,
                buffer_size=buffer_size,
            )
            results = run_parallel_sessions(topo, plan)
            for index, result in enumerate(results):
                rows.append(
                    BenchRow(
                        label=label,
                        transport=topo.transport,
                        file_bytes=file_size,
                        buffer_bytes=buffer_size,
                        parallel=parallelism,
                        rep=rep,
                        session=index,
                        request_ms=result.phase("request").total_ms,
                        transfer_ms=result.phase("transfer").total_ms,
                        keyaccess_ms=result.phase("keyaccess").total_ms,
                        decrypt_ms=result.phase("decrypt").total_ms,
                        session_ms=result.session_ms,
                    )
                )
            check_replay(topo)
        finally:
            topo.stop()
        _append_rows(out_path, rows[-parallelism:])
    return rows


def parallel_sweep(
    workdir: Path,
    *,
    file_size: int = 16 << 20,
    levels: tuple[int, ...] = (1, 2, 4, 8),
    seed: str = "bench",
    out_path: Path | None = None,
) -> list[BenchRow]:
    """The parallel-session sweep: P in ``levels``, one rep each."""
    rows: list[BenchRow] = []
    for level in levels:
        rows.extend(
            run_bench(
                workdir,
                file_size=file_size,
                parallelism=level,
                seed=seed,
                label="parallel-sweep",
                out_path=out_path,
            )
        )
    return rows


def buffer_sweep(
    workdir: Path,
    *,
    file_size: int = 16 << 20,
    buffers: tuple[int, ...] = (32 << 10, 1 << 20, 4 << 20),
    seed: str = "bench",
    out_path: Path | None = None,
) -> list[BenchRow]:
    """The transfer buffer-size sweep at P=1."""
    rows: list[BenchRow] = []
    for buffer in buffers:
        rows.extend(
            run_bench(
                workdir,
                file_size=file_size,
                parallelism=1,
                buffer_size=buffer,
                seed=seed,
                label="buffer-sweep",
                out_path=out_path,
            )
        )
    return rows


def median(rows: list[BenchRow], column: str) -> float:
    if not rows:
        raise BbsError("median of empty row set")
    return float(statistics.median(getattr(r, column) for r in rows))


def rows_where(rows: list[BenchRow], **criteria) -> list[BenchRow]:
    out = rows
    for key, value in criteria.items():
        out = [r for r in out if getattr(r, key) == value]
    return out
