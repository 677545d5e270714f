"""Offline chain-of-custody verification.

Everything here works from an exported chain file alone: the consortium
registry and the contract configuration are recovered from the genesis
block, so a report is independently reproducible by any party holding
the export.

Checks run in a fixed order per block and stop at the first failure:

1. chain-integrity: header linkage, data digest, orderer signature.
2. validity-recomputation: endorsement signatures and policies plus
   MVCC, replayed from genesis; recorded flags must match.
3. hash-bindings: key entities are internally consistent (ID
   derivations, digest lengths, file signature verifies against the
   recorded ciphertext digest).
4. access-control: a request's Flag matches the committed access rule;
   transfers only ever follow Flag=true.
5. phase-ordering: per event, committed phases advance one step at a
   time in protocol order.

The module also hosts the storage forensics used to check receiver-side
secrecy (no key bytes, no plaintext windows) after adversarial runs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .contract import (
    EventEntity,
    FileEntity,
    KeyEntity,
    Phase,
    file_key,
    key_id_for,
    phase_rank,
)
from .encoding import decode
from .errors import BbsError
from .ledger import (
    Block,
    ChainFile,
    WorldState,
    apply_block,
    data_digest,
    header_digest,
    read_chain_file,
    verify_block_signature,
)
from .offstate import verify_file_digest
from .txflow import Transaction, TxValidity, validate_block
from .config import genesis_payload_from_block

# ---------------------------------------------------------------------------
# Report types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AuditRow:
    """One transaction as seen by the auditor."""

    height: int
    index: int
    txid: str
    function: str
    validity: TxValidity
    endorser_orgs: tuple[str, ...]
    write_hashes: tuple[tuple[str, str], ...]  # (state key, sha256 hex)


@dataclass
class EventTrail:
    event_id: str
    file_id: str
    receiver: str
    flag: bool
    final_phase: Phase
    valid_txids: tuple[str, ...] = ()


@dataclass
class CustodyReport:
    channel: str
    file_id: str  # "" = unfiltered
    verdict: str  # "PASS" | "FAIL"
    first_failure: str  # "" on PASS; "<check> at block H tx I: detail"
    rows: list[AuditRow] = field(default_factory=list)
    events: dict[str, EventTrail] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    def render(self) -> str:
        lines = [f"channel: {self.channel}", f"verdict: {self.verdict}"]
        if self.first_failure:
            lines.append(f"first failure: {self.first_failure}")
        if self.file_id:
            lines.append(f"file filter: {self.file_id}")
        lines.append("")
        lines.append("height\tindex\ttxid\tfunction\tvalidity\tendorsers\twrites")
        for row in self.rows:
            writes = ",".join(f"{k}={h[:16]}" for k, h in row.write_hashes)
            lines.append(
                f"{row.height}\t{row.index}\t{row.txid[:16]}\t{row.function}"
                f"\t{row.validity.value}\t{'+'.join(row.endorser_orgs)}\t{writes}"
            )
        if self.events:
            lines.append("")
            lines.append("event\tfile\treceiver\tflag\tfinal-phase\tvalid-txs")
            for trail in self.events.values():
                lines.append(
                    f"{trail.event_id[:16]}\t{trail.file_id}\t{trail.receiver}"
                    f"\t{trail.flag}\t{trail.final_phase.value}\t{len(trail.valid_txids)}"
                )
        return "\n".join(lines)


class _AuditFailure(BbsError):
    def __init__(self, check: str, where: str, detail: str) -> None:
        super().__init__(f"{check} at {where}: {detail}")
        self.check = check
        self.where = where
        self.detail = detail


# ---------------------------------------------------------------------------
# Decoding helpers
# ---------------------------------------------------------------------------

_ENTITY_NAMESPACES = {"file": FileEntity, "event": EventEntity, "key": KeyEntity}


def _decode_entity(namespace: str, value: bytes) -> object | None:
    expected = _ENTITY_NAMESPACES.get(namespace)
    if expected is None:
        return None
    try:
        entity = decode(value)
    except BbsError:
        return None
    return entity if isinstance(entity, expected) else None


def _row_for(height: int, index: int, tx: Transaction, flag: TxValidity) -> AuditRow:
    hashes = [
        (w.key.rendered, hashlib.sha256(w.value).hexdigest())
        for w in tx.rwset.public_writes
    ]
    # Private writes expose only their hash on-chain; record it as-is.
    hashes.extend(
        (pw.public_state_key().rendered, pw.value_hash.hex())
        for pw in tx.rwset.private_writes
    )
    return AuditRow(
        height=height,
        index=index,
        txid=tx.txid,
        function=tx.proposal.function,
        validity=flag,
        endorser_orgs=tuple(e.endorser.org for e in tx.endorsements),
        write_hashes=tuple(hashes),
    )


# ---------------------------------------------------------------------------
# Per-transaction semantic checks (run against pre-state, VALID txs only)
# ---------------------------------------------------------------------------


def _check_bindings(tx: Transaction, state: WorldState, where: str) -> None:
    for write in tx.rwset.public_writes:
        entity = _decode_entity(write.key.namespace, write.value)
        if isinstance(entity, KeyEntity):
            if len(entity.Hash_Enc_File) != 32 or len(entity.Key_Hash) != 32:
                raise _AuditFailure("hash-bindings", where, "key entity digest length")
            if not verify_file_digest(
                entity.Hash_Enc_File, entity.Public_Key, entity.Signature
            ):
                raise _AuditFailure(
                    "hash-bindings", where, "ciphertext signature does not verify"
                )
        elif isinstance(entity, EventEntity):
            if entity.KeyID and entity.KeyID != key_id_for(entity.ID):
                raise _AuditFailure(
                    "hash-bindings", where, "event KeyID not derived from event ID"
                )
        elif isinstance(entity, FileEntity):
            if len(entity.Hash) != 32:
                raise _AuditFailure("hash-bindings", where, "file digest length")


def _check_access(tx: Transaction, state: WorldState, where: str) -> None:
    function = tx.proposal.function
    for write in tx.rwset.public_writes:
        entity = _decode_entity(write.key.namespace, write.value)
        if not isinstance(entity, EventEntity):
            continue
        if function == "request" or entity.Phase is Phase.REQUESTED:
            held = state.get(file_key(entity.FileID))
            rule: tuple[str, ...] = ()
            if held is not None:
                file_entity = _decode_entity("file", held.value)
                if isinstance(file_entity, FileEntity):
                    rule = file_entity.Access_Rule
            expected = entity.Receiver in rule
            if entity.Flag != expected:
                raise _AuditFailure(
                    "access-control",
                    where,
                    f"event {entity.ID[:16]} Flag={entity.Flag} but rule "
                    f"{'grants' if expected else 'denies'} {entity.Receiver}",
                )
        elif not entity.Flag:
            raise _AuditFailure(
                "access-control",
                where,
                f"{function} committed for event {entity.ID[:16]} with Flag=false",
            )


def _check_phases(tx: Transaction, state: WorldState, where: str) -> None:
    for write in tx.rwset.public_writes:
        entity = _decode_entity(write.key.namespace, write.value)
        if not isinstance(entity, EventEntity):
            continue
        held = state.get(write.key)
        if held is None:
            if entity.Phase is not Phase.REQUESTED:
                raise _AuditFailure(
                    "phase-ordering",
                    where,
                    f"event {entity.ID[:16]} created at phase {entity.Phase.value}",
                )
            continue
        prior = _decode_entity("event", held.value)
        if not isinstance(prior, EventEntity):
            raise _AuditFailure("phase-ordering", where, "prior event undecodable")
        if phase_rank(entity.Phase) != phase_rank(prior.Phase) + 1:
            raise _AuditFailure(
                "phase-ordering",
                where,
                f"event {entity.ID[:16]} jumped {prior.Phase.value} -> "
                f"{entity.Phase.value}",
            )


# ---------------------------------------------------------------------------
# The auditor
# ---------------------------------------------------------------------------


def audit_blocks(blocks: list[Block], file_id: str = "") -> CustodyReport:
    """Re-verify an exported chain and build its custody report."""
    if not blocks:
        return CustodyReport("", file_id, "FAIL", "chain-integrity at block 0: empty chain")
    try:
        payload = genesis_payload_from_block(blocks[0])
    except BbsError as exc:
        return CustodyReport(
            "", file_id, "FAIL", f"chain-integrity at block 0: bad genesis ({exc})"
        )
    report = CustodyReport(payload.channel, file_id, "PASS", "")
    registry = payload.registry
    state = WorldState()
    seen_nonces: set[tuple[str, bytes]] = set()
    events: dict[str, EventTrail] = {}

    try:
        prev = None
        for block in blocks:
            height = block.header.height
            where = f"block {height}"
            if prev is None:
                if height != 0:
                    raise _AuditFailure("chain-integrity", where, "chain must start at 0")
            else:
                if height != prev.header.height + 1:
                    raise _AuditFailure("chain-integrity", where, "height not consecutive")
                if block.header.prev_hash != header_digest(prev.header):
                    raise _AuditFailure("chain-integrity", where, "prev-hash link broken")
            if block.header.data_hash != data_digest(block.transactions):
                raise _AuditFailure("chain-integrity", where, "data digest mismatch")
            if not verify_block_signature(block, registry):
                raise _AuditFailure(
                    "chain-integrity", where, "orderer signature does not verify"
                )
            if len(block.validity) != len(block.transactions):
                raise _AuditFailure("chain-integrity", where, "validity vector length")

            if height > 0:
                recomputed = validate_block(
                    block, state.get, registry, payload.contract, seen_nonces
                )
                for index, (tx, recorded) in enumerate(
                    zip(block.transactions, block.validity)
                ):
                    got = recomputed[index]
                    if got is recorded:
                        continue
                    pair = (got, recorded)
                    if TxValidity.INVALID_ENDORSEMENT in pair:
                        check = "endorsement-policy"
                    elif TxValidity.INVALID_MVCC in pair:
                        check = "mvcc-conflict"
                    else:
                        check = "validity-recomputation"
                    raise _AuditFailure(
                        check,
                        f"block {height} tx {index}",
                        f"recorded {recorded.value}, recomputed {got.value}",
                    )
                for index, (tx, flag) in enumerate(
                    zip(block.transactions, block.validity)
                ):
                    tx_where = f"block {height} tx {index}"
                    if flag is TxValidity.VALID:
                        _check_bindings(tx, state, tx_where)
                        _check_access(tx, state, tx_where)
                        _check_phases(tx, state, tx_where)
                    _collect(events, tx, flag)

            if height > 0:
                for index, (tx, flag) in enumerate(
                    zip(block.transactions, block.validity)
                ):
                    report.rows.append(_row_for(height, index, tx, flag))
            apply_block(state, block)
            prev = block
    except _AuditFailure as failure:
        report.verdict = "FAIL"
        report.first_failure = f"{failure.check} at {failure.where}: {failure.detail}"

    if file_id:
        wanted = {
            trail.event_id for trail in events.values() if trail.file_id == file_id
        }
        report.rows = [
            row
            for row in report.rows
            if any(
                key == f"file:{file_id}" or key.partition(":")[2] in wanted
                for key, _ in row.write_hashes
            )
        ]
        events = {eid: t for eid, t in events.items() if t.file_id == file_id}
    report.events = events
    return report


def _collect(events: dict[str, EventTrail], tx: Transaction, flag: TxValidity) -> None:
    if flag is not TxValidity.VALID:
        return
    for write in tx.rwset.public_writes:
        entity = _decode_entity(write.key.namespace, write.value)
        if not isinstance(entity, EventEntity):
            continue
        trail = events.get(entity.ID)
        if trail is None:
            trail = EventTrail(
                event_id=entity.ID,
                file_id=entity.FileID,
                receiver=entity.Receiver,
                flag=entity.Flag,
                final_phase=entity.Phase,
            )
        else:
            trail.final_phase = entity.Phase
        trail.valid_txids = trail.valid_txids + (tx.txid,)
        events[entity.ID] = trail


def audit_file(path: Path, file_id: str = "") -> CustodyReport:
    try:
        blocks = read_chain_file(Path(path))
    except BbsError as exc:
        return CustodyReport(
            "", file_id, "FAIL", f"chain-integrity at block ?: unreadable chain ({exc})"
        )
    return audit_blocks(blocks, file_id)


def export_chain(blocks: list[Block], path: Path) -> None:
    """Write blocks in the same framed format peers persist."""
    out = ChainFile(Path(path))
    try:
        for block in blocks:
            out.append(block)
    finally:
        out.close()


# ---------------------------------------------------------------------------
# Storage forensics
# ---------------------------------------------------------------------------


def storage_files(root: Path) -> list[Path]:
    return sorted(p for p in Path(root).rglob("*") if p.is_file())


def _stream_contains(path: Path, needles: list[bytes]) -> bytes | None:
    """Return the first needle found in the file, else None (streamed)."""
    if not needles:
        return None
    carry = max(len(n) for n in needles) - 1
    tail = b""
    with open(path, "rb") as handle:
        while True:
            chunk = handle.read(1 << 20)
            if not chunk:
                return None
            window = tail + chunk
            for needle in needles:
                if needle in window:
                    return needle
            tail = window[-carry:] if carry else b""


def scan_storage(root: Path, needles: list[bytes]) -> list[tuple[Path, bytes]]:
    """Find byte needles anywhere under a node's data directory."""
    hits = []
    for path in storage_files(root):
        found = _stream_contains(path, needles)
        if found is not None:
            hits.append((path, found))
    return hits


def plaintext_probes(plaintext: bytes, window: int = 64) -> list[bytes]:
    """Aligned sub-blocks whose absence rules out any ``window``-byte match.

    Any ``window``-long substring of the plaintext fully contains at least
    one aligned block of half that length, so if no probe occurs in a blob,
    no ``window``-byte window of the plaintext occurs either. (A probe hit
    is conservatively treated as disclosure.)
    """
    half = window // 2
    if len(plaintext) < window:
        return [plaintext] if plaintext else []
    return [plaintext[i : i + half] for i in range(0, len(plaintext) - half + 1, half)]
