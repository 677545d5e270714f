"""Client-side session driver: honest and adversarial file-sharing flows.

A session walks one file through the four custody transactions (request,
transfer, key access, decrypt), each gated on its commit notification.
The adversarial modes model a dishonest client only; peers and the
orderer always run the honest protocol.

Modes
-----
Auto
    Run all four phases to completion.
Manual
    Run phases up to ``stop_after_phase`` and pause, returning enough
    state to resume later (``resume_event_id``).
DishonestDrop
    Behave honestly until the named phase, then collect that phase's
    endorsement but never submit the transaction for ordering. The
    chaincode side effects of endorsement happen; the ledger record
    does not.
TamperFile
    Corrupt the stored source file after registration, before the
    transfer. The ciphertext then decrypts fine but fails the
    registered-hash comparison, ending the session in DecryptFailed.
WrongReceiver
    Drive a session for a receiver the access rule does not name. The
    request commits with Flag=false and the session halts at phase 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .contract import EventEntity, FileEntity, Phase
from .errors import BbsError, ConfigError, InvokeFailed
from .node import ClientCore, InvokeOutcome
from .topology import Topology
from .txflow import TxValidity

# ---------------------------------------------------------------------------
# Plans and results
# ---------------------------------------------------------------------------

PHASE_FUNCTIONS = ("request", "transfer", "keyaccess", "decrypt")


class SessionMode(enum.Enum):
    AUTO = "Auto"
    MANUAL = "Manual"
    DISHONEST_DROP = "DishonestDrop"
    TAMPER_FILE = "TamperFile"
    WRONG_RECEIVER = "WrongReceiver"


@dataclass(frozen=True)
class SessionPlan:
    file_id: str
    sender_org: str
    receiver_org: str
    mode: SessionMode = SessionMode.AUTO
    drop_after: str = "keyaccess"  # DishonestDrop: last phase endorsed
    parallelism: int = 1
    buffer_size: int = 0  # wire chunk size for the transfer; 0 = protocol default

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")
        if self.buffer_size < 0:
            raise ConfigError("buffer_size must be >= 0")
        if self.drop_after not in PHASE_FUNCTIONS:
            raise ConfigError(
                f"drop_after must be one of {PHASE_FUNCTIONS}, got {self.drop_after!r}"
            )


@dataclass
class PhaseResult:
    function: str
    txid: str
    validity: TxValidity | None  # None: endorsed but never submitted
    height: int
    endorse_ms: int
    commit_ms: int
    app_error: str = ""

    @property
    def total_ms(self) -> int:
        return self.endorse_ms + self.commit_ms


class SessionOutcome(enum.Enum):
    DECRYPTED = "decrypted"
    DENIED = "denied"  # Flag=false at phase 1
    DROPPED = "dropped"  # dishonest client withheld a transaction
    DECRYPT_FAILED = "decrypt_failed"  # hash mismatch recorded on ledger
    PAUSED = "paused"  # manual mode stopped early


@dataclass
class SessionResult:
    plan: SessionPlan
    event_id: str
    outcome: SessionOutcome
    phases: list[PhaseResult] = field(default_factory=list)
    session_ms: int = 0
    plain_hash: str = ""  # hex digest the decrypt phase reported
    final_phase: Phase | None = None

    def phase(self, function: str) -> PhaseResult:
        for entry in self.phases:
            if entry.function == function:
                return entry
        raise KeyError(function)


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def upload_file(
    topo: Topology,
    owner_org: str,
    file_id: str,
    data: bytes,
    access_rule: tuple[str, ...] | list[str],
    description: str = "",
) -> FileEntity:
    """Seed the owner's off-state store and register the file on-chain.

    Must run inside ``topo.call`` (or any schedulable context) like every
    other blocking client operation.
    """
    topo.peer(owner_org).offstate.put_bytes(file_id, data)
    outcome = topo.client(owner_org).invoke(
        "upload",
        (file_id, file_id, ",".join(access_rule), description),
        [owner_org],
    )
    if outcome.validity is not TxValidity.VALID:
        raise BbsError(f"upload did not commit VALID: {outcome.validity}")
    return outcome.result


def _phase_result(function: str, outcome: InvokeOutcome) -> PhaseResult:
    return PhaseResult(
        function=function,
        txid=outcome.txid,
        validity=outcome.validity,
        height=outcome.height,
        endorse_ms=outcome.endorse_ms,
        commit_ms=outcome.commit_ms,
        app_error=outcome.app_error or "",
    )


def tamper_stored_file(topo: Topology, owner_org: str, file_id: str) -> None:
    """Flip one byte of the stored source file, bypassing the store API.

    Models an owner mutating the file on disk after registering it; the
    ledger still holds the original hash.
    """
    path = topo.peer(owner_org).offstate.path(file_id)
    with open(path, "r+b") as handle:
        first = handle.read(1)
        handle.seek(0)
        handle.write(bytes([first[0] ^ 0xFF]))


# ---------------------------------------------------------------------------
# The driver
# ---------------------------------------------------------------------------


def run_session(
    topo: Topology,
    plan: SessionPlan,
    *,
    client: ClientCore | None = None,
    stop_after_phase: int = 4,
    resume_event_id: str = "",
    resume_from_phase: int = 2,
    key_wait_ms: int = 60_000,
    key_poll_ms: int = 100,
) -> SessionResult:
    """Drive one sharing session; blocking, so run it via ``topo.call``.

    The receiver's client proposes every phase: phase 1 needs sender and
    receiver endorsements, phases 2 and 3 the sender's only, phase 4 the
    receiver's only. Each phase waits for its commit notification before
    the next starts. ``client`` overrides the driving client (the bench
    uses this to spread parallel sessions across clients).
    """
    driver = client if client is not None else topo.client(plan.receiver_org)
    sender, receiver = plan.sender_org, plan.receiver_org
    drop = plan.mode is SessionMode.DISHONEST_DROP
    start_phase = resume_from_phase if resume_event_id else 1
    if not 1 <= start_phase <= 4:
        raise ConfigError("resume_from_phase must be between 2 and 4")
    t0 = driver.env.now_ms()
    result = SessionResult(plan=plan, event_id=resume_event_id, outcome=SessionOutcome.PAUSED)

    def finish(outcome: SessionOutcome, final: Phase | None) -> SessionResult:
        result.outcome = outcome
        result.final_phase = final
        result.session_ms = driver.env.now_ms() - t0
        return result

    def endorse_only(function: str, args: tuple[str, ...], orgs: list[str]) -> SessionResult:
        proposal, _responses = driver.endorse(function, args, orgs)
        result.phases.append(
            PhaseResult(
                function=function,
                txid=proposal.txid,
                validity=None,
                height=-1,
                endorse_ms=driver.env.now_ms() - t0,
                commit_ms=0,
            )
        )
        return finish(SessionOutcome.DROPPED, None)

    # -- phase 1: transfer request --
    if not resume_event_id:
        if drop and plan.drop_after == "request":
            return endorse_only("request", (plan.file_id, sender), [sender, receiver])
        outcome = driver.invoke("request", (plan.file_id, sender), [sender, receiver])
        result.phases.append(_phase_result("request", outcome))
        if outcome.validity is not TxValidity.VALID:
            raise BbsError(f"request did not commit VALID: {outcome.validity}")
        event: EventEntity = outcome.result
        result.event_id = event.ID
        if not event.Flag:
            return finish(SessionOutcome.DENIED, event.Phase)
        if stop_after_phase <= 1:
            return finish(SessionOutcome.PAUSED, event.Phase)
    event_id = result.event_id

    # -- phase 2: file transfer --
    if start_phase <= 2:
        transfer_args = (
            (event_id, str(plan.buffer_size)) if plan.buffer_size else (event_id,)
        )
        if plan.mode is SessionMode.TAMPER_FILE:
            tamper_stored_file(topo, sender, plan.file_id)
        if drop and plan.drop_after == "transfer":
            return endorse_only("transfer", transfer_args, [sender])
        outcome = driver.invoke("transfer", transfer_args, [sender])
        result.phases.append(_phase_result("transfer", outcome))
        if outcome.validity is not TxValidity.VALID:
            raise BbsError(f"transfer did not commit VALID: {outcome.validity}")
        if stop_after_phase <= 2:
            return finish(SessionOutcome.PAUSED, Phase.TRANSFERRED)

    # -- phase 3: key access --
    if start_phase <= 3:
        if drop and plan.drop_after == "keyaccess":
            return endorse_only("keyaccess", (event_id,), [sender])
        outcome = driver.invoke("keyaccess", (event_id,), [sender])
        result.phases.append(_phase_result("keyaccess", outcome))
        if outcome.validity is not TxValidity.VALID:
            raise BbsError(f"keyaccess did not commit VALID: {outcome.validity}")
        if stop_after_phase <= 3:
            return finish(SessionOutcome.PAUSED, Phase.KEY_RELEASED)

    # -- phase 4: decrypt --
    # The key reaches the receiver peer's private store asynchronously
    # (dissemination after the phase-3 commit), so retry while it is absent.
    if drop and plan.drop_after == "decrypt":
        return endorse_only("decrypt", (event_id,), [receiver])
    deadline = driver.env.now_ms() + key_wait_ms
    while True:
        try:
            outcome = driver.invoke("decrypt", (event_id,), [receiver])
            break
        except InvokeFailed as exc:
            if exc.code != "KeyMissing" or driver.env.now_ms() >= deadline:
                raise
            driver.env.sleep_ms(key_poll_ms)
    result.phases.append(_phase_result("decrypt", outcome))
    if outcome.validity is not TxValidity.VALID:
        raise BbsError(f"decrypt did not commit VALID: {outcome.validity}")
    result.plain_hash = outcome.result
    if outcome.app_error:
        return finish(SessionOutcome.DECRYPT_FAILED, Phase.DECRYPT_FAILED)
    return finish(SessionOutcome.DECRYPTED, Phase.DECRYPTED)


def run_parallel_sessions(
    topo: Topology,
    plan: SessionPlan,
    *,
    clients: list[ClientCore] | None = None,
    key_wait_ms: int = 60_000,
) -> list[SessionResult]:
    """Run ``plan.parallelism`` independent sessions concurrently.

    All sessions share the plan (same file, same direction); each gets its
    own event because every proposal carries a fresh nonce. Results come
    back in launch order.
    """
    boxes = []
    for index in range(plan.parallelism):
        client = clients[index % len(clients)] if clients else None
        boxes.append(
            topo.spawn_call(
                lambda c=client: run_session(
                    topo, plan, client=c, key_wait_ms=key_wait_ms
                ),
                name=f"session-{index}",
            )
        )
    topo.drain()
    if topo.kernel is None:
        for box in boxes:
            box.thread.join()  # type: ignore[attr-defined]
    return [box.unwrap() for box in boxes]
