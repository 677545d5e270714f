"""Hash-chained block ledger and versioned world state.

Blocks link by SHA-256 over the canonical encoding of the previous header;
the data hash covers the encoded transaction list. Validity flags are
assigned by validation and stored next to the transactions (invalid
transactions stay in the block as evidence). World state is an in-memory
versioned key/value map; recovery is replay of the append-only chain file.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Iterable

from .encoding import canonical, decode, encode
from .errors import ChainCorrupt, ChainMismatch, EncodingError
from .identity import ConsortiumRegistry, Role, Signature, verify

ZERO_HASH = b"\x00" * 32

# Version of a committed value: (block height, transaction index within block)
Version = tuple[int, int]


def hash_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def hash_value(value: Any) -> bytes:
    return hash_bytes(encode(value))


@canonical
@dataclass(frozen=True)
class StateKey:
    namespace: str
    id: str

    def __post_init__(self) -> None:
        if not self.namespace or ":" in self.namespace:
            raise ValueError(f"bad namespace: {self.namespace!r}")

    @property
    def rendered(self) -> str:
        return f"{self.namespace}:{self.id}"


@dataclass(frozen=True)
class VersionedValue:
    value: bytes  # canonical encoding of the stored entity
    version: Version


class WorldState:
    """Versioned public key/value map. Thread safety is the owner's job."""

    def __init__(self) -> None:
        self._entries: dict[str, tuple[StateKey, VersionedValue]] = {}

    def get(self, key: StateKey) -> VersionedValue | None:
        entry = self._entries.get(key.rendered)
        return entry[1] if entry else None

    def put(self, key: StateKey, value: bytes, version: Version) -> None:
        self._entries[key.rendered] = (key, VersionedValue(value, version))

    def items(self) -> list[tuple[StateKey, VersionedValue]]:
        return [self._entries[k] for k in sorted(self._entries)]

    def __len__(self) -> int:
        return len(self._entries)

    def digest(self) -> bytes:
        """Order-independent digest over (key, value, version) triples."""
        triples = [
            (key.rendered, vv.value, list(vv.version)) for key, vv in self.items()
        ]
        return hash_bytes(encode(triples))


@canonical
class TxValidity(enum.Enum):
    VALID = "VALID"
    INVALID_ENDORSEMENT = "INVALID_ENDORSEMENT"
    INVALID_MVCC = "INVALID_MVCC"
    INVALID_OTHER = "INVALID_OTHER"


@canonical
@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    data_hash: bytes


@canonical
@dataclass(frozen=True)
class Block:
    header: BlockHeader
    transactions: tuple  # of txflow.Transaction
    validity: tuple  # of TxValidity, same length as transactions
    orderer_sig: Signature


def header_digest(header: BlockHeader) -> bytes:
    return hash_bytes(encode(header))


def data_digest(transactions: Iterable[Any]) -> bytes:
    return hash_bytes(encode(list(transactions)))


def verify_block_signature(block: Block, registry: ConsortiumRegistry) -> bool:
    signer = registry.lookup(block.orderer_sig.signer)
    if signer is None or signer.role is not Role.ORDERER:
        return False
    return verify(signer, encode(block.header), block.orderer_sig)


def genesis_payload_of(block: Block) -> Any:
    """The configuration payload carried by the genesis block's only tx."""
    if block.header.height != 0 or block.header.prev_hash != ZERO_HASH:
        raise ChainCorrupt("not a genesis block")
    if len(block.transactions) != 1:
        raise ChainCorrupt("genesis block must carry exactly one transaction")
    tx = block.transactions[0]
    if tx.proposal.function != "genesis" or len(tx.proposal.args) != 1:
        raise ChainCorrupt("malformed genesis transaction")
    return tx.proposal.args[0]


class Blockchain:
    """In-memory chain with structural append checks."""

    def __init__(self) -> None:
        self.blocks: list[Block] = []

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def tip(self) -> Block | None:
        return self.blocks[-1] if self.blocks else None

    def append_block(self, block: Block) -> None:
        if not self.blocks:
            if block.header.height != 0 or block.header.prev_hash != ZERO_HASH:
                raise ChainMismatch("first block must be genesis")
        else:
            prev = self.blocks[-1]
            if block.header.height != prev.header.height + 1:
                raise ChainMismatch(
                    f"height {block.header.height} after {prev.header.height}"
                )
            if block.header.prev_hash != header_digest(prev.header):
                raise ChainMismatch("prev-hash does not match tip header")
        if block.header.data_hash != data_digest(block.transactions):
            raise ChainMismatch("data-hash does not cover transaction list")
        if len(block.validity) != len(block.transactions):
            raise ChainMismatch("validity flags do not match transaction count")
        self.blocks.append(block)


def apply_block(state: WorldState, block: Block) -> None:
    """Apply the writes of VALID transactions, versioned (height, tx index).

    Private writes land as their hash under the public composite key; the
    member-held values live in each peer's private store, not here.
    """
    height = block.header.height
    for index, (tx, flag) in enumerate(zip(block.transactions, block.validity)):
        if flag is not TxValidity.VALID:
            continue
        version = (height, index)
        for write in tx.rwset.public_writes:
            state.put(write.key, write.value, version)
        for pwrite in tx.rwset.private_writes:
            state.put(pwrite.public_state_key(), pwrite.value_hash, version)


def replay_chain(blocks: Iterable[Block]) -> WorldState:
    """Rebuild world state from scratch by applying every block in order."""
    state = WorldState()
    chain = Blockchain()
    for block in blocks:
        chain.append_block(block)
        apply_block(state, block)
    return state


def verify_chain(blocks: list[Block], registry: ConsortiumRegistry) -> None:
    """Structural verification: links, data hashes, orderer signatures.

    Raises ChainCorrupt naming the first violation. Validity-flag content is
    deliberately out of scope here; the auditor recomputes flags separately.
    """
    if not blocks:
        raise ChainCorrupt("empty chain")
    if blocks[0].header.height != 0 or blocks[0].header.prev_hash != ZERO_HASH:
        raise ChainCorrupt("block 0: bad genesis header")
    for i, block in enumerate(blocks):
        if block.header.height != i:
            raise ChainCorrupt(f"block {i}: height {block.header.height}")
        if i > 0:
            expected = header_digest(blocks[i - 1].header)
            if block.header.prev_hash != expected:
                raise ChainCorrupt(f"block {i}: prev-hash link broken")
        if block.header.data_hash != data_digest(block.transactions):
            raise ChainCorrupt(f"block {i}: data-hash mismatch")
        if len(block.validity) != len(block.transactions):
            raise ChainCorrupt(f"block {i}: validity flag count mismatch")
        if not verify_block_signature(block, registry):
            raise ChainCorrupt(f"block {i}: orderer signature invalid")


# --- append-only chain file ----------------------------------------------------
# `<channel>.chain`: 4-byte big-endian length prefix + canonical block encoding.


class ChainFile:
    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._fh: BinaryIO | None = None

    def append(self, block: Block) -> None:
        if self._fh is None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")
        raw = encode(block)
        self._fh.write(struct.pack(">I", len(raw)) + raw)
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_chain_file(path: Path) -> list[Block]:
    blocks: list[Block] = []
    data = Path(path).read_bytes()
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise ChainCorrupt("truncated block length prefix")
        (size,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + size > len(data):
            raise ChainCorrupt("truncated block body")
        try:
            block = decode(data[pos : pos + size])
        except EncodingError as exc:
            raise ChainCorrupt(f"undecodable block at offset {pos - 4}: {exc}") from exc
        if not isinstance(block, Block):
            raise ChainCorrupt("frame does not contain a block")
        blocks.append(block)
        pos += size
    return blocks
