"""Reference validator: brute-force serial re-execution of a block.

The production validator works over an overlay view so it never copies state.
This module re-derives the same flags the slow, obvious way: keep a mutable
copy of the committed state, check each transaction from scratch against it,
and apply its writes the moment it is ruled valid. Any disagreement between
the two is a bug in one of them.

Also hosts the randomized block generator the comparison tests feed from.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

from bbs.encoding import canonical, encode
from bbs.errors import PolicyParseError
from bbs.identity import (
    ConsortiumRegistry,
    RegistryBuilder,
    Role,
    SigningKey,
    generate_identity,
)
from bbs.ledger import (
    Block,
    BlockHeader,
    StateKey,
    TxValidity,
    WorldState,
    data_digest,
)
from bbs.pdc import CollectionConfig
from bbs.txflow import (
    ContractConfig,
    Endorsement,
    NamespaceTemplate,
    PrivateWriteEntry,
    Proposal,
    ReadEntry,
    ReadWriteSet,
    Transaction,
    WriteEntry,
    keypolicy_key,
    make_endorsement,
    resolve_policy,
    rwset_digest,
    verify_endorsement,
)

# ---------------------------------------------------------------------------
# reference validation
# ---------------------------------------------------------------------------


def oracle_flags(
    block: Block,
    base: WorldState,
    registry: ConsortiumRegistry,
    config: ContractConfig,
    seen_nonces: set[tuple[str, bytes]],
) -> list[TxValidity]:
    """Serial re-execution: validate, then immediately apply, one tx at a time."""
    live = WorldState()
    for key, versioned in base.items():
        live.put(key, versioned.value, versioned.version)
    nonces = set(seen_nonces)
    written_this_block: set[str] = set()
    flags: list[TxValidity] = []
    for index, tx in enumerate(block.transactions):
        flag = _check_one(tx, live, registry, config, nonces, written_this_block)
        nonces.add((tx.proposal.proposer.rendered, tx.proposal.nonce))
        if flag is TxValidity.VALID:
            version = (block.header.height, index)
            for write in tx.rwset.public_writes:
                live.put(write.key, write.value, version)
                written_this_block.add(write.key.rendered)
            for pwrite in tx.rwset.private_writes:
                public = pwrite.public_state_key()
                live.put(public, pwrite.value_hash, version)
                written_this_block.add(public.rendered)
        flags.append(flag)
    return flags


def _check_one(
    tx: Transaction,
    live: WorldState,
    registry: ConsortiumRegistry,
    config: ContractConfig,
    nonces: set[tuple[str, bytes]],
    written_this_block: set[str],
) -> TxValidity:
    rwset = tx.rwset
    if not tx.endorsements:
        return TxValidity.INVALID_OTHER
    if not registry.admit(tx.proposal.proposer):
        return TxValidity.INVALID_OTHER
    if (tx.proposal.proposer.rendered, tx.proposal.nonce) in nonces:
        return TxValidity.INVALID_OTHER
    agreed = {e.result_hash for e in tx.endorsements}
    if agreed != {rwset_digest(rwset)}:
        return TxValidity.INVALID_OTHER
    read_keys = [r.key.rendered for r in rwset.reads]
    if len(read_keys) != len(set(read_keys)):
        return TxValidity.INVALID_OTHER
    write_keys = [w.key.rendered for w in rwset.public_writes]
    write_keys += [p.public_state_key().rendered for p in rwset.private_writes]
    if len(write_keys) != len(set(write_keys)):
        return TxValidity.INVALID_OTHER

    digest = tx.proposal.digest()
    endorsing_orgs: set[str] = set()
    for endorsement in tx.endorsements:
        endorser = endorsement.endorser
        if not registry.admit(endorser) or endorser.role is not Role.PEER:
            return TxValidity.INVALID_ENDORSEMENT
        if not verify_endorsement(endorsement, digest):
            return TxValidity.INVALID_ENDORSEMENT
        endorsing_orgs.add(endorser.org)
    try:
        policy = resolve_policy(rwset, config, live.get)
    except PolicyParseError:
        return TxValidity.INVALID_OTHER
    if not policy.satisfied(endorsing_orgs):
        return TxValidity.INVALID_ENDORSEMENT

    for read in rwset.reads:
        current = live.get(read.key)
        if read.version != (current.version if current else None):
            return TxValidity.INVALID_MVCC
    for rendered in write_keys:
        if rendered in written_this_block:
            return TxValidity.INVALID_MVCC
    return TxValidity.VALID


# ---------------------------------------------------------------------------
# randomized block generator
# ---------------------------------------------------------------------------


@canonical
@dataclass(frozen=True)
class OwnedDoc:
    """Synthetic entity for exercising @field policy templates."""

    owner: str
    body: str


@dataclass
class OracleWorld:
    registry: ConsortiumRegistry
    config: ContractConfig
    peer_keys: dict[str, SigningKey]
    client_key: SigningKey
    orderer_key: SigningKey
    base: WorldState
    seen_nonces: set[tuple[str, bytes]]
    orgs: tuple[str, ...]


def build_world(seed: str = "oracle") -> OracleWorld:
    """Three orgs, committed base keys, one keypolicy entry, one collection."""
    builder = RegistryBuilder()
    orgs = ("Org1", "Org2", "Org3")
    peer_keys: dict[str, SigningKey] = {}
    for org in orgs:
        builder.register_org(org)
    for org in orgs:
        _, key = builder.generate(org, Role.PEER, "peer0", seed=f"{seed}/{org}/peer".encode())
        peer_keys[org] = key
    _, client_key = builder.generate("Org1", Role.CLIENT, "client0", seed=f"{seed}/client".encode())
    _, orderer_key = builder.generate("Org1", Role.ORDERER, "orderer0", seed=f"{seed}/ord".encode())
    registry = builder.freeze()

    config = ContractConfig(
        default_policy="AND(Org1,Org2)",
        templates=(NamespaceTemplate(namespace="doc", template="AND(@owner)"),),
    )

    base = WorldState()
    for i in range(4):
        base.put(StateKey("file", f"f{i}"), encode(f"seed-value-{i}"), (1, i))
    base.put(StateKey("doc", "d0"), encode(OwnedDoc(owner="Org3", body="hold")), (1, 4))
    # file:f2 is governed by a committed key-level policy: only Org3 may touch it.
    base.put(keypolicy_key(StateKey("file", "f2")), encode("AND(Org3)"), (1, 5))
    base.put(
        StateKey("collection", "sess"),
        encode(CollectionConfig(collection_id="sess", members=("Org1", "Org3"), policy="AND(Org3)")),
        (1, 6),
    )

    seen = {("Org1/client/client0", b"spent-nonce-0000")}
    return OracleWorld(
        registry=registry,
        config=config,
        peer_keys=peer_keys,
        client_key=client_key,
        orderer_key=orderer_key,
        base=base,
        seen_nonces=seen,
        orgs=orgs,
    )


def _proposal(world: OracleWorld, rng: random.Random, nonce: bytes | None = None) -> Proposal:
    return Proposal(
        proposer=world.client_key.identity,
        function="put",
        args=(f"arg{rng.randrange(100)}",),
        timestamp_ms=rng.randrange(10_000),
        nonce=nonce if nonce is not None else rng.randbytes(16),
    )


def _endorse(proposal: Proposal, rwset: ReadWriteSet, keys: list[SigningKey]) -> Transaction:
    digest = proposal.digest()
    endorsements = tuple(make_endorsement(k, digest, rwset) for k in keys)
    return Transaction(proposal=proposal, rwset=rwset, endorsements=endorsements)


def random_block(world: OracleWorld, rng: random.Random, height: int = 2) -> Block:
    """A block of 1..8 transactions drawn from honest and adversarial recipes."""
    n = rng.randint(1, 8)
    txs = []
    fresh = 0

    def fresh_key() -> StateKey:
        nonlocal fresh
        fresh += 1
        return StateKey("file", f"g{rng.randrange(1 << 30)}-{fresh}")

    def default_endorsers() -> list[SigningKey]:
        return [world.peer_keys["Org1"], world.peer_keys["Org2"]]

    for _ in range(n):
        kind = rng.choice(
            [
                "honest",
                "honest",
                "honest_read",
                "stale_read",
                "intra_block_conflict",
                "under_endorsed",
                "tampered_sig",
                "foreign_endorser",
                "client_endorser",
                "nonce_replay",
                "agreed_wrong_hash",
                "split_hash",
                "dup_writes",
                "keypolicy_honest",
                "keypolicy_wrong_org",
                "template_doc",
                "template_doc_wrong",
                "collection_private",
                "collection_unknown",
                "no_endorsements",
                "declare_keypolicy",
            ]
        )
        proposal = _proposal(world, rng)
        writes = (WriteEntry(fresh_key(), encode(f"v{rng.randrange(1000)}")),)
        rwset = ReadWriteSet(reads=(), public_writes=writes, private_writes=(), effects=())

        if kind == "honest":
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "honest_read":
            read = ReadEntry(StateKey("file", "f0"), (1, 0))
            rwset = ReadWriteSet((read,), writes, (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "stale_read":
            read = ReadEntry(StateKey("file", "f1"), (0, rng.randrange(5)))
            rwset = ReadWriteSet((read,), writes, (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "intra_block_conflict" and txs:
            prior = rng.choice(txs)
            if prior.rwset.public_writes:
                target = prior.rwset.public_writes[0].key
                rwset = ReadWriteSet((), (WriteEntry(target, encode("again")),), (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "under_endorsed":
            txs.append(_endorse(proposal, rwset, [world.peer_keys["Org1"]]))
        elif kind == "tampered_sig":
            tx = _endorse(proposal, rwset, default_endorsers())
            victim = tx.endorsements[0]
            bent = victim.signature.sig[:-1] + bytes([victim.signature.sig[-1] ^ 1])
            forged = Endorsement(
                endorser=victim.endorser,
                result_hash=victim.result_hash,
                signature=type(victim.signature)(signer=victim.signature.signer, sig=bent),
            )
            txs.append(
                Transaction(
                    proposal=proposal,
                    rwset=rwset,
                    endorsements=(forged,) + tx.endorsements[1:],
                )
            )
        elif kind == "foreign_endorser":
            _, rogue = generate_identity("Org1", Role.PEER, "peer9", seed=rng.randbytes(8))
            txs.append(_endorse(proposal, rwset, [rogue, world.peer_keys["Org2"]]))
        elif kind == "client_endorser":
            txs.append(_endorse(proposal, rwset, [world.client_key, world.peer_keys["Org2"]]))
        elif kind == "nonce_replay":
            replayed = _proposal(world, rng, nonce=b"spent-nonce-0000")
            txs.append(_endorse(replayed, rwset, default_endorsers()))
        elif kind == "agreed_wrong_hash":
            other = ReadWriteSet((), (WriteEntry(fresh_key(), b"x"),), (), ())
            tx = _endorse(proposal, other, default_endorsers())
            txs.append(Transaction(proposal=proposal, rwset=rwset, endorsements=tx.endorsements))
        elif kind == "split_hash":
            a = _endorse(proposal, rwset, [world.peer_keys["Org1"]])
            other = ReadWriteSet((), (WriteEntry(fresh_key(), b"y"),), (), ())
            b = _endorse(proposal, other, [world.peer_keys["Org2"]])
            txs.append(
                Transaction(
                    proposal=proposal,
                    rwset=rwset,
                    endorsements=a.endorsements + b.endorsements,
                )
            )
        elif kind == "dup_writes":
            key = fresh_key()
            doubled = (WriteEntry(key, b"one"), WriteEntry(key, b"two"))
            rwset = ReadWriteSet((), doubled, (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "keypolicy_honest":
            rwset = ReadWriteSet((), (WriteEntry(StateKey("file", "f2"), encode("upd")),), (), ())
            txs.append(_endorse(proposal, rwset, [world.peer_keys["Org3"]]))
        elif kind == "keypolicy_wrong_org":
            rwset = ReadWriteSet((), (WriteEntry(StateKey("file", "f2"), encode("upd")),), (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "template_doc":
            owner = rng.choice(world.orgs)
            entity = OwnedDoc(owner=owner, body="b")
            rwset = ReadWriteSet(
                (), (WriteEntry(StateKey("doc", f"d{rng.randrange(1 << 20)}"), encode(entity)),), (), ()
            )
            txs.append(_endorse(proposal, rwset, [world.peer_keys[owner]]))
        elif kind == "template_doc_wrong":
            entity = OwnedDoc(owner="Org3", body="b")
            rwset = ReadWriteSet(
                (), (WriteEntry(StateKey("doc", f"d{rng.randrange(1 << 20)}"), encode(entity)),), (), ()
            )
            txs.append(_endorse(proposal, rwset, [world.peer_keys["Org1"]]))
        elif kind == "collection_private":
            pw = PrivateWriteEntry(
                collection_id="sess",
                key=StateKey("key", f"k{rng.randrange(1 << 20)}"),
                value_hash=rng.randbytes(32),
            )
            rwset = ReadWriteSet((), (), (pw,), ())
            keys = [world.peer_keys["Org3"]] if rng.random() < 0.7 else default_endorsers()
            txs.append(_endorse(proposal, rwset, keys))
        elif kind == "collection_unknown":
            pw = PrivateWriteEntry(
                collection_id="ghost",
                key=StateKey("key", f"k{rng.randrange(1 << 20)}"),
                value_hash=rng.randbytes(32),
            )
            rwset = ReadWriteSet((), (), (pw,), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        elif kind == "no_endorsements":
            txs.append(Transaction(proposal=proposal, rwset=rwset, endorsements=()))
        elif kind == "declare_keypolicy":
            key = fresh_key()
            declared = WriteEntry(keypolicy_key(key), encode("AND(Org3)"))
            rwset = ReadWriteSet((), (WriteEntry(key, encode("v")), declared), (), ())
            txs.append(_endorse(proposal, rwset, default_endorsers()))
        else:  # intra_block_conflict with no prior tx degrades to honest
            txs.append(_endorse(proposal, rwset, default_endorsers()))

    transactions = tuple(txs)
    header = BlockHeader(height=height, prev_hash=bytes(32), data_hash=data_digest(transactions))
    return Block(
        header=header,
        transactions=transactions,
        validity=(),
        orderer_sig=world.orderer_key.sign(encode(header)),
    )
