"""Private data collections.

Member peers hold values, everyone else holds only the hash recorded in
world state under the ``pdc:`` composite key. Values produced during
endorsement are staged (write-ahead logged) and promoted to the private
store only when the transaction commits VALID; added members receive the
value by sender push after commit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .encoding import canonical, decode, encode
from .errors import ChainCorrupt
from .ledger import StateKey, Version, hash_bytes


COLLECTION_NAMESPACE = "collection"


def collection_id_for(key: StateKey, members: Iterable[str]) -> str:
    """Deterministic collection instance id: hash(key ∥ sorted member orgs)."""
    return hash_bytes(encode((key.rendered, sorted(members)))).hex()


def collection_state_key(collection_id: str) -> StateKey:
    return StateKey(COLLECTION_NAMESPACE, collection_id)


@canonical
@dataclass(frozen=True)
class CollectionConfig:
    """Public record of a collection instance, written at creation time.

    ``policy`` is the collection-level endorsement policy: AND over the orgs
    that held the value when the instance was created, so a reshare keeps the
    previous holders as the endorsers of record.
    """

    collection_id: str
    members: tuple  # of OrgId, sorted
    policy: str

    def state_key(self) -> StateKey:
        return collection_state_key(self.collection_id)


def make_collection_config(key: StateKey, members: Iterable[str], endorser_orgs: Iterable[str]) -> CollectionConfig:
    members_sorted = tuple(sorted(set(members)))
    policy = "AND(" + ",".join(sorted(set(endorser_orgs))) + ")"
    return CollectionConfig(
        collection_id=collection_id_for(key, members_sorted),
        members=members_sorted,
        policy=policy,
    )


@canonical
@dataclass(frozen=True)
class PrivatePayload:
    """Dissemination wire message pushing a committed private value."""

    collection_id: str
    key: StateKey
    value: bytes
    tx_id: bytes  # proposal digest of the committing transaction


@dataclass(frozen=True)
class StagedWrite:
    collection_id: str
    key: StateKey
    value: bytes


class PrivateStore:
    """One peer's private partitions plus endorsement-time staging.

    Every mutation is appended to a write-ahead log under the peer's data
    directory, so staged values survive a restart between endorsement and
    commit. In-memory only when constructed without a directory (tests).
    """

    def __init__(self, data_dir: Path | None = None) -> None:
        self._values: dict[tuple[str, str], tuple[bytes, Version]] = {}
        self._staged: dict[bytes, list[StagedWrite]] = {}
        self._wal_path: Path | None = None
        self._wal = None
        if data_dir is not None:
            pdc_dir = Path(data_dir) / "pdc"
            pdc_dir.mkdir(parents=True, exist_ok=True)
            self._wal_path = pdc_dir / "staging.wal"
            self._replay_wal()
            self._wal = open(self._wal_path, "ab")

    # --- write-ahead log ---------------------------------------------------

    def _append(self, record: tuple) -> None:
        if self._wal is None:
            return
        raw = encode(record)
        self._wal.write(struct.pack(">I", len(raw)) + raw)
        self._wal.flush()

    def _replay_wal(self) -> None:
        assert self._wal_path is not None
        if not self._wal_path.exists():
            return
        data = self._wal_path.read_bytes()
        pos = 0
        while pos + 4 <= len(data):
            (size,) = struct.unpack(">I", data[pos : pos + 4])
            end = pos + 4 + size
            if end > len(data):
                break  # torn tail write; everything before it is intact
            self._apply_record(decode(data[pos + 4 : end]))
            pos = end

    def _apply_record(self, record: tuple) -> None:
        kind = record[0]
        if kind == "stage":
            _, digest, cid, key, value = record
            self._staged.setdefault(digest, []).append(StagedWrite(cid, key, value))
        elif kind == "commit":
            _, digest, height, index = record
            for sw in self._staged.pop(digest, []):
                self._values[(sw.collection_id, sw.key.rendered)] = (sw.value, (height, index))
        elif kind == "discard":
            self._staged.pop(record[1], None)
        elif kind == "accept":
            _, cid, key, value, height, index = record
            self._values[(cid, key.rendered)] = (value, (height, index))
        else:
            raise ChainCorrupt(f"unknown WAL record {kind!r}")

    def close(self) -> None:
        if self._wal is not None:
            self._wal.close()
            self._wal = None

    # --- staging (endorsement path) -----------------------------------------

    def stage(self, proposal_digest: bytes, collection_id: str, key: StateKey, value: bytes) -> None:
        record = ("stage", proposal_digest, collection_id, key, value)
        self._append(record)
        self._apply_record(record)

    def staged_for(self, proposal_digest: bytes) -> list[StagedWrite]:
        return list(self._staged.get(proposal_digest, []))

    def has_staged(self) -> bool:
        return bool(self._staged)

    # --- commit path --------------------------------------------------------

    def commit_stage(self, proposal_digest: bytes, version: Version) -> list[StagedWrite]:
        """Promote staged writes of a VALID transaction into the store."""
        promoted = self._staged.get(proposal_digest, [])
        record = ("commit", proposal_digest, version[0], version[1])
        self._append(record)
        self._apply_record(record)
        return promoted

    def discard_stage(self, proposal_digest: bytes) -> None:
        if proposal_digest in self._staged:
            record = ("discard", proposal_digest)
            self._append(record)
            self._apply_record(record)

    def accept(self, collection_id: str, key: StateKey, value: bytes, version: Version) -> None:
        """Dissemination accept: idempotent by construction (same value)."""
        record = ("accept", collection_id, key, value, version[0], version[1])
        self._append(record)
        self._apply_record(record)

    # --- reads ----------------------------------------------------------------

    def get(self, collection_id: str, key: StateKey) -> tuple[bytes, Version] | None:
        return self._values.get((collection_id, key.rendered))

    def has(self, collection_id: str, key: StateKey) -> bool:
        return (collection_id, key.rendered) in self._values

    def snapshot_bytes(self) -> bytes:
        """Every byte this store holds, for blindness scans in tests."""
        parts: list[bytes] = []
        for (cid, rendered), (value, version) in sorted(self._values.items()):
            parts.append(encode((cid, rendered, value, list(version))))
        for digest, writes in sorted(self._staged.items()):
            for sw in writes:
                parts.append(encode((digest, sw.collection_id, sw.key.rendered, sw.value)))
        return b"".join(parts)
