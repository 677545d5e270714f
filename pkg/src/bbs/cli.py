"""Operator command line.

Commands
--------
node run   Serve one peer or the orderer as a long-running daemon
           (socket transport, static address book from the config).
share      Drive a sharing session, honest or adversarial, against an
           in-process topology built from the config; exports the chain.
bench      Latency sweeps (parallel sessions, buffer sizes) emitting
           tab-separated rows.
audit      Re-verify an exported chain offline and print the custody
           report.
gc         Reclaim off-state ciphertexts for finished or abandoned
           sessions from a stopped peer's data directory.

Exit codes are zero exactly when the command reached its documented
outcome: a FAIL audit verdict exits 1, usage and runtime errors exit 2.
"""

from __future__ import annotations

import os
import signal
import sys
import threading
from pathlib import Path

import click

from . import audit as audit_mod
from . import bench as bench_mod
from .config import load_genesis
from .contract import EventEntity, Phase, file_key
from .encoding import decode
from .errors import BbsError
from .ledger import WorldState, apply_block, read_chain_file
from .offstate import OffStateStore
from .session import (
    SessionMode,
    SessionPlan,
    SessionResult,
    run_parallel_sessions,
    run_session,
    upload_file,
)
from .topology import build_topology, standalone_runtime


def _fail(message: str, code: int = 2) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group()
def main() -> None:
    """Auditable big-file sharing over a permissioned ledger."""


# ---------------------------------------------------------------------------
# node run
# ---------------------------------------------------------------------------


@main.group()
def node() -> None:
    """Node daemons."""


@node.command("run")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--id", "node_id", required=True, help="org/role/label identity")
@click.option("--workdir", required=True, type=click.Path())
def node_run(config_path: str, node_id: str, workdir: str) -> None:
    """Serve one node until SIGTERM/SIGINT; flushes state on shutdown."""
    try:
        config = load_genesis(Path(config_path))
        env, core = standalone_runtime(config, node_id, Path(workdir))
    except (BbsError, OSError) as exc:
        _fail(str(exc))
        return
    stop = threading.Event()

    def _on_signal(_signum: int, _frame: object) -> None:
        stop.set()

    signal.signal(signal.SIGTERM, _on_signal)
    signal.signal(signal.SIGINT, _on_signal)
    # Handlers are live before readiness is announced, so a supervisor may
    # send SIGTERM the moment it reads this line.
    bound = env.bound_address()
    click.echo(f"{node_id} serving on {bound[0]}:{bound[1]}")
    sys.stdout.flush()
    stop.wait()
    click.echo(f"{node_id} shutting down")
    env.close()
    if hasattr(core, "close"):
        core.close()
    sys.exit(0)


# ---------------------------------------------------------------------------
# share
# ---------------------------------------------------------------------------

_MODES = {m.value: m for m in SessionMode}


def _print_session(result: SessionResult) -> None:
    for phase in result.phases:
        validity = phase.validity.value if phase.validity else "NOT-SUBMITTED"
        line = (
            f"phase {phase.function:<9} txid={phase.txid[:16]} "
            f"validity={validity} endorse={phase.endorse_ms}ms "
            f"commit={phase.commit_ms}ms"
        )
        if phase.app_error:
            line += f" app_error={phase.app_error}"
        click.echo(line)
    final = result.final_phase.value if result.final_phase else "-"
    click.echo(
        f"outcome={result.outcome.value} event={result.event_id[:16]} "
        f"final_phase={final} session={result.session_ms}ms"
    )
    if result.plain_hash:
        click.echo(f"plaintext_sha256={result.plain_hash}")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--workdir", required=True, type=click.Path())
@click.option("--file-id", required=True)
@click.option("--sender", "sender_org", required=True)
@click.option("--receiver", "receiver_org", required=True)
@click.option("--mode", type=click.Choice(sorted(_MODES)), default="Auto")
@click.option("--drop-after", type=click.Choice(["request", "transfer", "keyaccess", "decrypt"]),
              default="keyaccess", help="DishonestDrop: last phase to endorse")
@click.option("--parallel", default=1, show_default=True)
@click.option("--buffer", "buffer_size", default=0, show_default=True,
              help="transfer chunk bytes; 0 = protocol default")
@click.option("--stop-after-phase", default=4, show_default=True)
@click.option("--seed-size", default=1 << 20, show_default=True,
              help="fixture bytes to register when --file-id is new")
def share(
    config_path: str,
    workdir: str,
    file_id: str,
    sender_org: str,
    receiver_org: str,
    mode: str,
    drop_after: str,
    parallel: int,
    buffer_size: int,
    stop_after_phase: int,
    seed_size: int,
) -> None:
    """Run sharing sessions and export the chain for offline audit."""
    try:
        config = load_genesis(Path(config_path))
        plan = SessionPlan(
            file_id=file_id,
            sender_org=sender_org,
            receiver_org=receiver_org,
            mode=_MODES[mode],
            drop_after=drop_after,
            parallelism=parallel,
            buffer_size=buffer_size,
        )
        topo = build_topology(config, Path(workdir))
    except (BbsError, OSError) as exc:
        _fail(str(exc))
        return
    try:
        registered = topo.peer(sender_org).state.get(file_key(file_id)) is not None
        if not registered:
            # Self-contained runs: register a deterministic fixture. The rule
            # names the receiver except when the plan is a denial probe.
            rule = [
                org
                for org in config.org_names()
                if org != sender_org
                and (plan.mode is not SessionMode.WRONG_RECEIVER or org != receiver_org)
            ]
            data = bench_mod.fixture_bytes(seed_size, config.seed)
            topo.call(upload_file, topo, sender_org, file_id, data, rule)
            click.echo(f"registered fixture {file_id} ({seed_size} bytes, rule={rule})")
        if parallel > 1:
            results = run_parallel_sessions(topo, plan)
        else:
            results = [
                topo.call(run_session, topo, plan, stop_after_phase=stop_after_phase)
            ]
        for result in results:
            _print_session(result)
        export = Path(workdir) / f"{config.channel}.chain"
        audit_mod.export_chain(topo.peer(receiver_org).blocks(), export)
        click.echo(f"chain exported to {export}")
    except BbsError as exc:
        _fail(str(exc))
    finally:
        topo.stop()


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _parse_size(text: str) -> int:
    lowered = text.strip().lower()
    if lowered in bench_mod.FIXTURE_SIZES:
        return bench_mod.FIXTURE_SIZES[lowered]
    try:
        return int(lowered)
    except ValueError:
        raise click.BadParameter(f"size must be bytes or one of {sorted(bench_mod.FIXTURE_SIZES)}")


@main.command()
@click.option("--workdir", required=True, type=click.Path())
@click.option("--file-size", default="1mb", show_default=True)
@click.option("--parallel", default=1, show_default=True)
@click.option("--buffer", "buffer_size", default=0, show_default=True)
@click.option("--reps", default=1, show_default=True)
@click.option("--sweep", type=click.Choice(["none", "parallel", "buffer"]),
              default="none", show_default=True)
@click.option("--transport", type=click.Choice(["sim", "socket"]), default="sim")
@click.option("--seed", default=None, help="defaults to $BBS_SEED or 'bench'")
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="results file (default <workdir>/results.tsv)")
def bench(
    workdir: str,
    file_size: str,
    parallel: int,
    buffer_size: int,
    reps: int,
    sweep: str,
    transport: str,
    seed: str | None,
    out_path: str | None,
) -> None:
    """Latency benchmarks; rows append to a tab-separated results file."""
    size = _parse_size(file_size)
    chosen_seed = seed if seed is not None else os.environ.get("BBS_SEED", "bench")
    out = Path(out_path) if out_path else Path(workdir) / "results.tsv"
    if reps < 1 and sweep == "none":
        click.echo("no repetitions requested; nothing to do")
        sys.exit(0)
    try:
        if sweep == "parallel":
            rows = bench_mod.parallel_sweep(
                Path(workdir), file_size=size, seed=chosen_seed, out_path=out
            )
        elif sweep == "buffer":
            rows = bench_mod.buffer_sweep(
                Path(workdir), file_size=size, seed=chosen_seed, out_path=out
            )
        else:
            rows = bench_mod.run_bench(
                Path(workdir),
                file_size=size,
                parallelism=parallel,
                buffer_size=buffer_size,
                reps=reps,
                seed=chosen_seed,
                transport=transport,
                out_path=out,
            )
    except BbsError as exc:
        _fail(f"bench aborted ({exc}); partial rows kept in {out}")
        return
    click.echo(f"{len(rows)} rows appended to {out}")
    for level in sorted({r.parallel for r in rows}):
        sel = bench_mod.rows_where(rows, parallel=level)
        click.echo(
            f"P={level}: median request={bench_mod.median(sel, 'request_ms'):.0f}ms "
            f"transfer={bench_mod.median(sel, 'transfer_ms'):.0f}ms "
            f"keyaccess={bench_mod.median(sel, 'keyaccess_ms'):.0f}ms "
            f"session={bench_mod.median(sel, 'session_ms'):.0f}ms"
        )


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


@main.command()
@click.option("--chain", "chain_path", required=True, type=click.Path(exists=True))
@click.option("--file-id", default="", help="restrict the report to one file")
def audit(chain_path: str, file_id: str) -> None:
    """Verify an exported chain and print the custody report."""
    report = audit_mod.audit_file(Path(chain_path), file_id)
    click.echo(report.render())
    sys.exit(0 if report.passed else 1)


# ---------------------------------------------------------------------------
# gc
# ---------------------------------------------------------------------------


@main.command()
@click.option("--data-dir", required=True, type=click.Path(exists=True),
              help="a stopped peer's data directory")
@click.option("--include-stalled", is_flag=True,
              help="also drop ciphertexts of sessions abandoned mid-protocol")
@click.option("--dry-run", is_flag=True)
def gc(data_dir: str, include_stalled: bool, dry_run: bool) -> None:
    """Delete off-state ciphertexts whose sessions no longer need them."""
    root = Path(data_dir)
    chain_path = root / "chain.bin"
    if not chain_path.exists():
        _fail(f"{chain_path} not found; is this a peer data directory?")
        return
    state = WorldState()
    for block in read_chain_file(chain_path):
        apply_block(state, block)
    phases: dict[str, Phase] = {}
    for key, held in state.items():
        if key.namespace != "event":
            continue
        try:
            entity = decode(held.value)
        except BbsError:
            continue
        if isinstance(entity, EventEntity):
            phases[entity.ID[:24]] = entity.Phase

    done = {Phase.DECRYPTED, Phase.DECRYPT_FAILED}
    stalled = {Phase.TRANSFERRED, Phase.KEY_RELEASED}
    store = OffStateStore(root / "offstate")
    freed = 0
    removed = 0
    for name in store.list_names():
        if not name.endswith(".fz"):
            continue
        phase = phases.get(name[:-3])
        if phase is None:
            continue
        if phase in done or (include_stalled and phase in stalled):
            size = store.size(name)
            click.echo(f"{'would remove' if dry_run else 'removed'} {name} ({size} bytes, {phase.value})")
            if not dry_run:
                store.delete(name)
                removed += 1
                freed += size
    click.echo(f"{removed} entries removed, {freed} bytes freed")


if __name__ == "__main__":
    main()
