"""Policies, endorsement flow, ordering and block validation."""

from __future__ import annotations

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bbs.encoding import encode
from bbs.errors import MismatchedEndorsements, PolicyParseError
from bbs.identity import Role, generate_identity
from bbs.ledger import (
    StateKey,
    TxValidity,
    WorldState,
    data_digest,
    header_digest,
    verify_block_signature,
)
from bbs.txflow import (
    AllOf,
    AnyOf,
    EndorsementPolicy,
    OrdererBatcher,
    PolicyLevel,
    PolicyOrg,
    PrivateWriteEntry,
    Proposal,
    ReadEntry,
    ReadWriteSet,
    Transaction,
    WriteEntry,
    assemble,
    finalize_block,
    keypolicy_key,
    make_endorsement,
    parse_policy,
    policy_orgs,
    private_state_key,
    resolve_policy,
    rwset_digest,
    validate_block,
    verify_endorsement,
)
from serial_oracle import OwnedDoc, build_world, oracle_flags, random_block

# ---------------------------------------------------------------------------
# policy expressions
# ---------------------------------------------------------------------------


def test_parse_policy_worked_examples() -> None:
    assert parse_policy("Org1") == PolicyOrg("Org1")
    assert parse_policy("AND(Org1,Org2)") == AllOf((PolicyOrg("Org1"), PolicyOrg("Org2")))
    nested = parse_policy("OR(Org1,AND(Org2,Org3))")
    assert nested == AnyOf((PolicyOrg("Org1"), AllOf((PolicyOrg("Org2"), PolicyOrg("Org3")))))
    assert parse_policy("AND( Org1 , Org2 )") == parse_policy("AND(Org1,Org2)")


def test_policy_satisfaction_worked_examples() -> None:
    conj = parse_policy("AND(Org1,Org2)")
    assert not conj.satisfied({"Org1"})
    assert conj.satisfied({"Org1", "Org2", "Org3"})

    mixed = parse_policy("OR(Org1,AND(Org2,Org3))")
    assert mixed.satisfied({"Org1"})
    assert mixed.satisfied({"Org2", "Org3"})
    assert not mixed.satisfied({"Org3"})
    assert not mixed.satisfied(set())


@pytest.mark.parametrize(
    "text",
    ["", "AND", "AND(", "AND()", "(Org1)", "Org1,Org2", "AND(Org1))", "AND(Org1,)"],
)
def test_parse_policy_rejects_malformed(text: str) -> None:
    with pytest.raises(PolicyParseError):
        parse_policy(text)


_org_names = st.sampled_from(["Org1", "Org2", "Org3", "acme-4", "lab_5"])
_policy_trees = st.recursive(
    _org_names.map(PolicyOrg),
    lambda inner: st.one_of(
        st.lists(inner, min_size=1, max_size=4).map(lambda cs: AllOf(tuple(cs))),
        st.lists(inner, min_size=1, max_size=4).map(lambda cs: AnyOf(tuple(cs))),
    ),
    max_leaves=12,
)


@given(_policy_trees)
def test_policy_render_parse_round_trip(tree) -> None:
    assert parse_policy(tree.render()) == tree


@given(_policy_trees)
def test_policy_satisfied_bounds(tree) -> None:
    assert tree.satisfied(policy_orgs(tree))
    assert not tree.satisfied(set())


def test_policy_orgs_collects_leaves() -> None:
    tree = parse_policy("OR(Org1,AND(Org2,OR(Org1,Org3)))")
    assert policy_orgs(tree) == {"Org1", "Org2", "Org3"}


def test_empty_operands_rejected_at_construction() -> None:
    with pytest.raises(PolicyParseError):
        AllOf(())
    with pytest.raises(PolicyParseError):
        AnyOf(())


def test_derived_state_key_shapes() -> None:
    target = StateKey("file", "f1")
    assert keypolicy_key(target).rendered == "keypolicy:file:f1"
    assert private_state_key("c0ffee", target).rendered == "pdc:c0ffee/file:f1"


# ---------------------------------------------------------------------------
# policy resolution
# ---------------------------------------------------------------------------


def _rwset(writes=(), reads=(), private=()) -> ReadWriteSet:
    return ReadWriteSet(reads=tuple(reads), public_writes=tuple(writes), private_writes=tuple(private), effects=())


def test_resolution_defaults_to_chaincode_policy() -> None:
    world = build_world("resolve")
    policy = resolve_policy(_rwset(), world.config, world.base.get)
    assert policy.level is PolicyLevel.CHAINCODE
    assert policy.render() == "AND(Org1,Org2)"

    fresh = _rwset(writes=[WriteEntry(StateKey("file", "new"), encode("v"))])
    assert resolve_policy(fresh, world.config, world.base.get).level is PolicyLevel.CHAINCODE


def test_resolution_prefers_committed_key_policy() -> None:
    world = build_world("resolve")
    rwset = _rwset(writes=[WriteEntry(StateKey("file", "f2"), encode("v"))])
    policy = resolve_policy(rwset, world.config, world.base.get)
    assert policy.level is PolicyLevel.KEY
    assert policy.render() == "AND(Org3)"
    assert policy.satisfied({"Org3"})
    assert not policy.satisfied({"Org1", "Org2"})


def test_resolution_instantiates_namespace_template() -> None:
    world = build_world("resolve")
    entity = OwnedDoc(owner="Org2", body="payload")
    rwset = _rwset(writes=[WriteEntry(StateKey("doc", "d9"), encode(entity))])
    policy = resolve_policy(rwset, world.config, world.base.get)
    assert policy.level is PolicyLevel.KEY
    assert policy.render() == "AND(Org2)"


def test_resolution_conjoins_multiple_key_policies() -> None:
    world = build_world("resolve")
    rwset = _rwset(
        writes=[
            WriteEntry(StateKey("file", "f2"), encode("v")),
            WriteEntry(StateKey("doc", "d9"), encode(OwnedDoc(owner="Org1", body="b"))),
        ]
    )
    policy = resolve_policy(rwset, world.config, world.base.get)
    assert policy.level is PolicyLevel.KEY
    assert policy.satisfied({"Org1", "Org3"})
    assert not policy.satisfied({"Org3"})


def test_resolution_skips_infrastructure_namespaces() -> None:
    world = build_world("resolve")
    declaration = WriteEntry(keypolicy_key(StateKey("file", "later")), encode("AND(Org3)"))
    policy = resolve_policy(_rwset(writes=[declaration]), world.config, world.base.get)
    assert policy.level is PolicyLevel.CHAINCODE


def test_resolution_uses_collection_policy_for_private_writes() -> None:
    world = build_world("resolve")
    pw = PrivateWriteEntry(collection_id="sess", key=StateKey("key", "k1"), value_hash=bytes(32))
    policy = resolve_policy(_rwset(private=[pw]), world.config, world.base.get)
    assert policy.level is PolicyLevel.COLLECTION
    assert policy.render() == "AND(Org3)"


def test_resolution_rejects_unknown_collection() -> None:
    world = build_world("resolve")
    pw = PrivateWriteEntry(collection_id="ghost", key=StateKey("key", "k1"), value_hash=bytes(32))
    with pytest.raises(PolicyParseError):
        resolve_policy(_rwset(private=[pw]), world.config, world.base.get)


def test_resolution_rejects_forged_entities() -> None:
    world = build_world("resolve")

    undecodable = _rwset(writes=[WriteEntry(StateKey("doc", "d1"), b"\xff\xff\xff")])
    with pytest.raises(PolicyParseError):
        resolve_policy(undecodable, world.config, world.base.get)

    missing_field = _rwset(writes=[WriteEntry(StateKey("doc", "d1"), encode("no-owner-here"))])
    with pytest.raises(PolicyParseError):
        resolve_policy(missing_field, world.config, world.base.get)

    state = WorldState()
    state.put(keypolicy_key(StateKey("file", "f9")), encode(42), (1, 0))
    bad_declared = _rwset(writes=[WriteEntry(StateKey("file", "f9"), encode("v"))])
    with pytest.raises(PolicyParseError):
        resolve_policy(bad_declared, world.config, state.get)


# ---------------------------------------------------------------------------
# endorsement assembly
# ---------------------------------------------------------------------------


def _proposal(world, nonce: bytes) -> Proposal:
    return Proposal(
        proposer=world.client_key.identity,
        function="put",
        args=("a",),
        timestamp_ms=7,
        nonce=nonce,
    )


def test_endorsement_verifies_and_binds_result() -> None:
    world = build_world("endorse")
    proposal = _proposal(world, b"n" * 16)
    rwset = _rwset(writes=[WriteEntry(StateKey("file", "x"), b"v")])
    endorsement = make_endorsement(world.peer_keys["Org1"], proposal.digest(), rwset)
    assert endorsement.result_hash == rwset_digest(rwset)
    assert verify_endorsement(endorsement, proposal.digest())

    other = _proposal(world, b"m" * 16)
    assert not verify_endorsement(endorsement, other.digest())


def test_assemble_requires_unanimous_results() -> None:
    world = build_world("assemble")
    proposal = _proposal(world, b"n" * 16)
    rwset = _rwset(writes=[WriteEntry(StateKey("file", "x"), b"v")])
    digest = proposal.digest()
    agreeing = [
        (rwset, make_endorsement(world.peer_keys["Org1"], digest, rwset)),
        (rwset, make_endorsement(world.peer_keys["Org2"], digest, rwset)),
    ]
    tx = assemble(proposal, agreeing)
    assert tx.txid == proposal.txid
    assert len(tx.endorsements) == 2

    rogue_rwset = _rwset(writes=[WriteEntry(StateKey("file", "x"), b"OTHER")])
    disagreeing = [
        (rwset, make_endorsement(world.peer_keys["Org1"], digest, rwset)),
        (rwset, make_endorsement(world.peer_keys["Org2"], digest, rogue_rwset)),
    ]
    with pytest.raises(MismatchedEndorsements):
        assemble(proposal, disagreeing)

    with pytest.raises(MismatchedEndorsements):
        assemble(proposal, [])


def test_distinct_nonces_give_distinct_txids() -> None:
    world = build_world("txid")
    a = _proposal(world, b"a" * 16)
    b = _proposal(world, b"b" * 16)
    assert a.txid != b.txid
    assert a.txid == _proposal(world, b"a" * 16).txid


# ---------------------------------------------------------------------------
# ordering
# ---------------------------------------------------------------------------


def _genesis_header(world):
    from bbs.ledger import ZERO_HASH, BlockHeader

    return BlockHeader(height=0, prev_hash=ZERO_HASH, data_hash=data_digest([]))


def _simple_tx(world, i: int) -> Transaction:
    proposal = _proposal(world, i.to_bytes(16, "big"))
    rwset = _rwset(writes=[WriteEntry(StateKey("file", f"b{i}"), encode(i))])
    digest = proposal.digest()
    return Transaction(
        proposal=proposal,
        rwset=rwset,
        endorsements=(
            make_endorsement(world.peer_keys["Org1"], digest, rwset),
            make_endorsement(world.peer_keys["Org2"], digest, rwset),
        ),
    )


def test_batcher_cuts_at_batch_size_in_fifo_order() -> None:
    world = build_world("batch")
    tip = _genesis_header(world)
    batcher = OrdererBatcher(world.orderer_key, tip, batch_size=3, timeout_ms=200)
    txs = [_simple_tx(world, i) for i in range(3)]
    assert batcher.submit(txs[0], now_ms=0) is None
    assert batcher.submit(txs[1], now_ms=10) is None
    block = batcher.submit(txs[2], now_ms=20)
    assert block is not None
    assert list(block.transactions) == txs
    assert block.validity == ()
    assert block.header.height == 1
    assert block.header.prev_hash == header_digest(tip)
    assert block.header.data_hash == data_digest(txs)
    assert verify_block_signature(block, world.registry)


def test_batcher_cuts_on_timeout() -> None:
    world = build_world("batch")
    batcher = OrdererBatcher(world.orderer_key, _genesis_header(world), batch_size=10, timeout_ms=200)
    assert batcher.poll(now_ms=500) is None
    assert batcher.deadline_ms() is None
    batcher.submit(_simple_tx(world, 0), now_ms=1000)
    assert batcher.deadline_ms() == 1200
    assert batcher.poll(now_ms=1100) is None
    block = batcher.poll(now_ms=1200)
    assert block is not None
    assert len(block.transactions) == 1
    assert batcher.deadline_ms() is None


def test_batcher_chains_successive_headers() -> None:
    world = build_world("batch")
    batcher = OrdererBatcher(world.orderer_key, _genesis_header(world), batch_size=1)
    first = batcher.submit(_simple_tx(world, 0), now_ms=0)
    second = batcher.submit(_simple_tx(world, 1), now_ms=0)
    assert second.header.height == first.header.height + 1
    assert second.header.prev_hash == header_digest(first.header)


def test_batcher_requires_orderer_identity() -> None:
    world = build_world("batch")
    with pytest.raises(MismatchedEndorsements):
        OrdererBatcher(world.client_key, _genesis_header(world))


def test_finalize_block_fills_flags() -> None:
    world = build_world("batch")
    batcher = OrdererBatcher(world.orderer_key, _genesis_header(world), batch_size=1)
    block = batcher.submit(_simple_tx(world, 0), now_ms=0)
    done = finalize_block(block, [TxValidity.VALID])
    assert done.validity == (TxValidity.VALID,)
    assert done.header == block.header


# ---------------------------------------------------------------------------
# validation
# ---------------------------------------------------------------------------


def _block_of(world, txs) -> object:
    batcher = OrdererBatcher(world.orderer_key, _genesis_header(world), batch_size=len(txs))
    block = None
    for tx in txs:
        block = batcher.submit(tx, now_ms=0)
    return block


def test_validate_block_worked_example() -> None:
    world = build_world("validate")
    honest = _simple_tx(world, 0)

    conflicting_write = WriteEntry(honest.rwset.public_writes[0].key, encode("again"))
    conflict = Transaction(
        proposal=_proposal(world, b"c" * 16),
        rwset=_rwset(writes=[conflicting_write]),
        endorsements=(),
    )
    digest = conflict.proposal.digest()
    conflict = Transaction(
        proposal=conflict.proposal,
        rwset=conflict.rwset,
        endorsements=(
            make_endorsement(world.peer_keys["Org1"], digest, conflict.rwset),
            make_endorsement(world.peer_keys["Org2"], digest, conflict.rwset),
        ),
    )

    stale_rwset = _rwset(
        reads=[ReadEntry(StateKey("file", "f0"), (0, 3))],
        writes=[WriteEntry(StateKey("file", "s"), b"v")],
    )
    stale_proposal = _proposal(world, b"s" * 16)
    stale = Transaction(
        proposal=stale_proposal,
        rwset=stale_rwset,
        endorsements=(
            make_endorsement(world.peer_keys["Org1"], stale_proposal.digest(), stale_rwset),
            make_endorsement(world.peer_keys["Org2"], stale_proposal.digest(), stale_rwset),
        ),
    )

    under_rwset = _rwset(writes=[WriteEntry(StateKey("file", "u"), b"v")])
    under_proposal = _proposal(world, b"u" * 16)
    under = Transaction(
        proposal=under_proposal,
        rwset=under_rwset,
        endorsements=(make_endorsement(world.peer_keys["Org1"], under_proposal.digest(), under_rwset),),
    )

    replayed = _simple_tx(world, 0)  # same nonce as `honest`

    block = _block_of(world, [honest, conflict, stale, under, replayed])
    flags = validate_block(block, world.base.get, world.registry, world.config, world.seen_nonces)
    assert flags == [
        TxValidity.VALID,
        TxValidity.INVALID_MVCC,
        TxValidity.INVALID_MVCC,
        TxValidity.INVALID_ENDORSEMENT,
        TxValidity.INVALID_OTHER,
    ]


def test_validate_block_leaves_nonce_set_untouched() -> None:
    world = build_world("validate")
    before = set(world.seen_nonces)
    block = _block_of(world, [_simple_tx(world, 1)])
    validate_block(block, world.base.get, world.registry, world.config, world.seen_nonces)
    assert world.seen_nonces == before


def test_reads_of_absent_keys_use_none_version() -> None:
    world = build_world("validate")
    rwset = _rwset(
        reads=[ReadEntry(StateKey("file", "nowhere"), None)],
        writes=[WriteEntry(StateKey("file", "w"), b"v")],
    )
    proposal = _proposal(world, b"r" * 16)
    tx = Transaction(
        proposal=proposal,
        rwset=rwset,
        endorsements=(
            make_endorsement(world.peer_keys["Org1"], proposal.digest(), rwset),
            make_endorsement(world.peer_keys["Org2"], proposal.digest(), rwset),
        ),
    )
    flags = validate_block(
        _block_of(world, [tx]), world.base.get, world.registry, world.config, world.seen_nonces
    )
    assert flags == [TxValidity.VALID]


def test_validator_matches_serial_reexecution_oracle() -> None:
    world = build_world("compare")
    rng = random.Random("compare")
    seen: set[TxValidity] = set()
    for _ in range(75):
        block = random_block(world, rng)
        got = validate_block(block, world.base.get, world.registry, world.config, world.seen_nonces)
        want = oracle_flags(block, world.base, world.registry, world.config, world.seen_nonces)
        assert got == want
        seen.update(got)
    assert seen == set(TxValidity)  # the generator exercised every flag class
