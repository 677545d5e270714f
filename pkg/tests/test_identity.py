"""Identity, registry and signature behaviour."""

from __future__ import annotations

import pytest

from bbs.encoding import decode, encode
from bbs.errors import DuplicateIdentity, UnknownOrg
from bbs.identity import (
    ConsortiumRegistry,
    Identity,
    RegistryBuilder,
    Role,
    generate_identity,
    sign,
    verify,
)

# ---------------------------------------------------------------------------
# key generation
# ---------------------------------------------------------------------------


def test_seeded_generation_is_deterministic() -> None:
    a, _ = generate_identity("Org1", Role.PEER, "peer0", seed=b"alpha")
    b, _ = generate_identity("Org1", Role.PEER, "peer0", seed=b"alpha")
    assert a == b
    assert a.verification_key == b.verification_key


def test_distinct_seeds_give_distinct_keys() -> None:
    a, _ = generate_identity("Org1", Role.PEER, "peer0", seed=b"alpha")
    b, _ = generate_identity("Org1", Role.PEER, "peer0", seed=b"beta")
    assert a.verification_key != b.verification_key


def test_unseeded_generation_gives_fresh_keys() -> None:
    a, _ = generate_identity("Org1", Role.PEER, "peer0")
    b, _ = generate_identity("Org1", Role.PEER, "peer0")
    assert a.verification_key != b.verification_key


def test_rendered_name_shape() -> None:
    ident, _ = generate_identity("Org2", Role.CLIENT, "client0", seed=b"x")
    assert ident.rendered == "Org2/client/client0"


# ---------------------------------------------------------------------------
# signatures
# ---------------------------------------------------------------------------


def test_signature_verifies_and_tampering_fails() -> None:
    ident, key = generate_identity("Org1", Role.ORDERER, "orderer0", seed=b"sig")
    msg = b"ordered payload"
    signature = sign(key, msg)
    assert signature.signer == ident.rendered
    assert verify(ident, msg, signature)
    assert not verify(ident, msg + b"!", signature)

    other, _ = generate_identity("Org1", Role.ORDERER, "orderer1", seed=b"other")
    assert not verify(other, msg, signature)


def test_signature_with_wrong_signer_name_fails() -> None:
    ident, key = generate_identity("Org1", Role.PEER, "peer0", seed=b"s")
    signature = sign(key, b"m")
    forged = type(signature)(signer="Org9/peer/peer0", sig=signature.sig)
    assert not verify(ident, b"m", forged)


# ---------------------------------------------------------------------------
# registry
# ---------------------------------------------------------------------------


def _small_registry() -> tuple[ConsortiumRegistry, Identity]:
    builder = RegistryBuilder()
    for org in ("Org1", "Org2"):
        builder.register_org(org)
    first, _ = builder.generate("Org1", Role.PEER, "peer0", seed=b"r1")
    builder.generate("Org1", Role.CLIENT, "client0", seed=b"r2")
    builder.generate("Org2", Role.PEER, "peer0", seed=b"r3")
    return builder.freeze(), first


def test_registry_admits_exact_identity_only() -> None:
    registry, member = _small_registry()
    assert registry.admit(member)

    mutations = [
        Identity("Org2", member.role, member.label, member.verification_key),
        Identity(member.org, Role.CLIENT, member.label, member.verification_key),
        Identity(member.org, member.role, "peer9", member.verification_key),
        Identity(member.org, member.role, member.label, bytes(32)),
    ]
    for impostor in mutations:
        assert not registry.admit(impostor)


def test_registry_lookup_by_rendered_name() -> None:
    registry, member = _small_registry()
    assert registry.lookup(member.rendered) == member
    assert registry.lookup("Org1/peer/peer9") is None


def test_identities_for_filters_org_and_role() -> None:
    registry, member = _small_registry()
    peers = registry.identities_for("Org1", Role.PEER)
    assert peers == (member,)
    assert registry.identities_for("Org2", Role.CLIENT) == ()


def test_duplicate_registration_rejected() -> None:
    builder = RegistryBuilder()
    builder.register_org("Org1")
    with pytest.raises(DuplicateIdentity):
        builder.register_org("Org1")
    builder.generate("Org1", Role.PEER, "peer0", seed=b"a")
    with pytest.raises(DuplicateIdentity):
        builder.generate("Org1", Role.PEER, "peer0", seed=b"b")


def test_unknown_org_rejected() -> None:
    builder = RegistryBuilder()
    builder.register_org("Org1")
    with pytest.raises(UnknownOrg):
        builder.generate("Org9", Role.PEER, "peer0", seed=b"a")


def test_registry_survives_encoding() -> None:
    registry, member = _small_registry()
    loaded = decode(encode(registry))
    assert loaded == registry
    assert loaded.admit(member)

    _, key = generate_identity("Org1", Role.PEER, "peer0", seed=b"r1")
    signature = sign(key, b"payload")
    assert verify(loaded.lookup(member.rendered), b"payload", signature)
