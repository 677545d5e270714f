"""End-to-end pipeline tests over live peer, orderer and client runtimes."""

from __future__ import annotations

import time
from pathlib import Path

import pytest

from conftest import three_org_config
from bbs.config import build_identities, make_genesis_block, peer_secret_for
from bbs.contract import FileEntity, file_key
from bbs.errors import AccessDenied, ChainMismatch, InvokeFailed, Unreachable
from bbs.identity import Role
from bbs.ledger import TxValidity
from bbs.netsim import SimEnv, SimKernel, SimTransport
from bbs.node import PeerCore
from bbs.topology import Topology, build_topology
from bbs.txflow import Proposal, assemble

# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _await_height(topo: Topology, height: int) -> None:
    """Block until every peer has committed up to ``height``."""
    if topo.kernel is not None:
        topo.run_until_quiescent()
    else:
        deadline = time.monotonic() + 15.0
        while time.monotonic() < deadline:
            if all(core.chain.height >= height for core in topo.peer_cores.values()):
                break
            time.sleep(0.01)
    heights = {core.node_id: core.chain.height for core in topo.peer_cores.values()}
    assert all(h >= height for h in heights.values()), heights


# ---------------------------------------------------------------------------
# happy path
# ---------------------------------------------------------------------------


def test_upload_commits_and_peers_converge(any_topology: Topology) -> None:
    topo = any_topology
    topo.peer("Org1").offstate.put_bytes("report.bin", b"quarterly numbers")

    client = topo.client("Org1")
    outcome = topo.call(
        client.invoke, "upload", ("report.bin", "report", "Org2,Org3", "Q3"), ["Org1"]
    )

    assert outcome.valid
    assert outcome.validity is TxValidity.VALID
    assert outcome.height == 1
    assert outcome.app_error == ""
    entity = outcome.result
    assert isinstance(entity, FileEntity)
    assert entity.Owner == "Org1"
    assert entity.Access_Rule == ("Org2", "Org3")

    _await_height(topo, 1)
    digests = {core.world_digest() for core in topo.peer_cores.values()}
    assert len(digests) == 1

    # Any org can read the committed registration back through a query.
    listed = topo.call(topo.client("Org3").query, "list", ())
    assert [f.ID for f in listed] == ["report.bin"]


def test_commit_notes_stream_to_every_subscriber(sim_topology: Topology) -> None:
    topo = sim_topology
    topo.peer("Org1").offstate.put_bytes("news.bin", b"headline")

    outcome = topo.call(
        topo.client("Org1").invoke, "upload", ("news.bin", "news", "", ""), ["Org1"]
    )
    topo.run_until_quiescent()

    for org in ("Org1", "Org2", "Org3"):
        log = topo.client(org).commit_log
        entries = [e for note in log for e in note.entries if note.height == 1]
        assert [(e.txid, e.validity) for e in entries] == [
            (outcome.txid, TxValidity.VALID)
        ]


def test_contract_error_reaches_the_client(any_topology: Topology) -> None:
    client = any_topology.client("Org1")
    with pytest.raises(InvokeFailed) as err:
        any_topology.call(
            client.invoke, "upload", ("ghost.bin", "g", "", ""), ["Org1"]
        )
    assert err.value.code == "FileMissing"


# ---------------------------------------------------------------------------
# replay protection
# ---------------------------------------------------------------------------


def test_replayed_nonce_is_refused_and_flagged(any_topology: Topology) -> None:
    topo = any_topology
    peer1 = topo.peer("Org1")
    peer1.offstate.put_bytes("one.bin", b"unique payload")
    client = topo.client("Org1")

    proposal = Proposal(
        proposer=client.identity,
        function="upload",
        args=("one.bin", "one", "Org2", ""),
        timestamp_ms=7,
        nonce=b"nonce-replay-0001",
    )
    ok = peer1.endorse(proposal)
    tx = assemble(proposal, [(ok.rwset, ok.endorsement)])

    def submit_and_wait() -> tuple[int, TxValidity]:
        return client.wait_commit(client.submit(tx), timeout_ms=30_000)

    height, validity = topo.call(submit_and_wait)
    assert validity is TxValidity.VALID

    # The endorsing peer now refuses the spent nonce outright.
    with pytest.raises(AccessDenied, match="nonce already committed"):
        peer1.endorse(proposal)

    # Forcing the identical transaction through ordering again gets it
    # committed, but flagged, so its writes never apply.
    replay_height, replay_validity = topo.call(submit_and_wait)
    assert replay_validity is TxValidity.INVALID_OTHER
    assert replay_height > height


# ---------------------------------------------------------------------------
# concurrency
# ---------------------------------------------------------------------------


def test_intra_block_write_conflict_is_flagged(sim_topology: Topology) -> None:
    topo = sim_topology
    topo.peer("Org1").offstate.put_bytes("contested.bin", b"same source")
    client = topo.client("Org1")

    first = topo.spawn_call(
        client.invoke, "upload", ("contested.bin", "a", "", ""), ["Org1"]
    )
    second = topo.spawn_call(
        client.invoke, "upload", ("contested.bin", "b", "", ""), ["Org1"]
    )
    topo.drain()

    outcomes = [first.unwrap(), second.unwrap()]
    assert sorted(o.validity.name for o in outcomes) == ["INVALID_MVCC", "VALID"]
    assert len({o.height for o in outcomes}) == 1  # decided in the same block
    assert topo.peer("Org2").state.get(file_key("contested.bin")) is not None


# ---------------------------------------------------------------------------
# validation is not re-execution
# ---------------------------------------------------------------------------


def test_validation_and_commit_never_run_contract_code(sim_topology: Topology) -> None:
    topo = sim_topology
    topo.peer("Org1").offstate.put_bytes("audit.bin", b"payload")
    before = {org: topo.peer(org).runtime.call_count for org in ("Org1", "Org2", "Org3")}

    outcome = topo.call(
        topo.client("Org1").invoke, "upload", ("audit.bin", "a", "Org2", ""), ["Org1"]
    )
    assert outcome.valid
    topo.run_until_quiescent()

    # Only the endorsing peer executed; the others validated and committed
    # the very same block purely from the recorded read/write sets.
    assert topo.peer("Org1").runtime.call_count == before["Org1"] + 1
    assert topo.peer("Org2").runtime.call_count == before["Org2"]
    assert topo.peer("Org3").runtime.call_count == before["Org3"]
    assert topo.peer("Org2").chain.height == 1
    assert topo.peer("Org2").world_digest() == topo.peer("Org1").world_digest()


# ---------------------------------------------------------------------------
# crash and restart
# ---------------------------------------------------------------------------


def test_peer_restart_recovers_chain_and_state(tmp_path: Path) -> None:
    config = three_org_config("restart/first-boot")
    topo = build_topology(config, tmp_path)
    try:
        topo.peer("Org1").offstate.put_bytes("keep.bin", b"durable")
        outcome = topo.call(
            topo.client("Org1").invoke, "upload", ("keep.bin", "keep", "Org2", ""), ["Org1"]
        )
        assert outcome.valid
        topo.run_until_quiescent()
        survivor = topo.peer("Org1")
        before_height = survivor.chain.height
        before_image = survivor.memory_image()
        before_nonces = set(survivor.seen_nonces)
    finally:
        topo.stop()

    identity = next(iter(topo.built.registry.identities_for("Org1", Role.PEER)))
    data_dir = tmp_path / identity.rendered.replace("/", "_")

    kernel = SimKernel(seed="restart/second-boot")
    try:
        transport = SimTransport(kernel)
        reborn = PeerCore(
            env=SimEnv(kernel, transport, identity.rendered),
            identity=identity,
            signing_key=topo.built.key_of(identity.rendered),
            registry=topo.built.registry,
            contract_config=config.contract,
            genesis_block=topo.genesis_block,
            data_dir=data_dir,
            peer_secret=peer_secret_for(config.seed, identity.rendered),
            peers_by_org={},
        )
        try:
            assert reborn.chain.height == before_height
            assert reborn.memory_image() == before_image
            assert reborn.seen_nonces == before_nonces
        finally:
            reborn.close()
    finally:
        kernel.shutdown()


def test_peer_refuses_chain_from_another_consortium(tmp_path: Path) -> None:
    config = three_org_config("restart/original")
    topo = build_topology(config, tmp_path)
    try:
        listed = topo.call(topo.client("Org1").query, "list", ())
        assert not listed  # nothing registered; genesis alone is on disk
    finally:
        topo.stop()

    stranger = three_org_config("restart/a-different-world")
    wrong_genesis = make_genesis_block(stranger, build_identities(stranger))

    identity = next(iter(topo.built.registry.identities_for("Org1", Role.PEER)))
    kernel = SimKernel(seed="restart/mismatch")
    try:
        transport = SimTransport(kernel)
        with pytest.raises(ChainMismatch, match="does not start at this genesis"):
            PeerCore(
                env=SimEnv(kernel, transport, identity.rendered),
                identity=identity,
                signing_key=topo.built.key_of(identity.rendered),
                registry=topo.built.registry,
                contract_config=config.contract,
                genesis_block=wrong_genesis,
                data_dir=tmp_path / identity.rendered.replace("/", "_"),
                peer_secret=peer_secret_for(config.seed, identity.rendered),
                peers_by_org={},
            )
    finally:
        kernel.shutdown()


# ---------------------------------------------------------------------------
# ordering service loss
# ---------------------------------------------------------------------------


def test_stopped_orderer_makes_submission_unreachable(sim_topology: Topology) -> None:
    topo = sim_topology
    topo.peer("Org1").offstate.put_bytes("f.bin", b"x")
    topo.stop_orderer()

    client = topo.client("Org1")
    with pytest.raises(Unreachable):
        topo.call(client.invoke, "upload", ("f.bin", "f", "", ""), ["Org1"], 5_000)

    # Endorsement still works: peers are alive, only ordering is down.
    proposal, responses = topo.call(
        client.endorse, "upload", ("f.bin", "f2", "", ""), ["Org1"], 5_000
    )
    assert len(responses) == 1
    assert topo.peer("Org1").chain.height == 0
