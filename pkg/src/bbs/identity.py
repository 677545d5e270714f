"""Organizations, node identities and Ed25519 signatures.

The consortium is declared once at genesis and immutable afterwards. Every
node and user identity is an (org, role, label) triple bound to an Ed25519
verification key; signatures are deterministic, so signing the same bytes
twice yields the same signature.
"""

from __future__ import annotations

import enum
import hashlib
import os
from dataclasses import dataclass
from functools import cached_property

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

from .encoding import canonical
from .errors import DuplicateIdentity, UnknownOrg


@canonical
class Role(enum.Enum):
    PEER = "peer"
    ORDERER = "orderer"
    CLIENT = "client"


@canonical
@dataclass(frozen=True)
class Identity:
    org: str
    role: Role
    label: str
    verification_key: bytes  # 32-byte Ed25519 public key

    @property
    def rendered(self) -> str:
        return f"{self.org}/{self.role.value}/{self.label}"


@canonical
@dataclass(frozen=True)
class Signature:
    signer: str  # rendered identity of the signer
    sig: bytes  # 64-byte Ed25519 signature


class SigningKey:
    """Private half of an identity. Never serialized into protocol messages."""

    def __init__(self, identity: Identity, private_key: Ed25519PrivateKey) -> None:
        self.identity = identity
        self._key = private_key

    def sign(self, message: bytes) -> Signature:
        return Signature(signer=self.identity.rendered, sig=self._key.sign(message))


def _keypair_from_seed(seed: bytes | None) -> Ed25519PrivateKey:
    if seed is None:
        material = os.urandom(32)
    else:
        material = hashlib.sha256(b"bbs/identity-key/" + seed).digest()
    return Ed25519PrivateKey.from_private_bytes(material)


def generate_identity(
    org: str, role: Role, label: str, *, seed: bytes | None = None
) -> tuple[Identity, SigningKey]:
    """Create an identity and its signing key.

    With ``seed`` the keypair is derived deterministically, which is what the
    simulator uses; without it the key material comes from ``os.urandom``.
    """
    key = _keypair_from_seed(seed)
    vk = key.public_key().public_bytes_raw()
    identity = Identity(org=org, role=role, label=label, verification_key=vk)
    return identity, SigningKey(identity, key)


def sign(key: SigningKey, message: bytes) -> Signature:
    return key.sign(message)


def verify(identity: Identity, message: bytes, signature: Signature) -> bool:
    """True iff ``signature`` was produced over ``message`` by ``identity``."""
    if signature.signer != identity.rendered:
        return False
    if len(identity.verification_key) != 32:
        return False
    try:
        pub = Ed25519PublicKey.from_public_bytes(identity.verification_key)
        pub.verify(signature.sig, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@canonical
@dataclass(frozen=True)
class ConsortiumRegistry:
    """Immutable genesis-declared set of orgs and admitted identities."""

    orgs: tuple[str, ...]
    identities: tuple[Identity, ...]

    @cached_property
    def _by_rendered(self) -> dict[str, Identity]:
        return {ident.rendered: ident for ident in self.identities}

    def lookup(self, rendered: str) -> Identity | None:
        return self._by_rendered.get(rendered)

    def admit(self, identity: Identity) -> bool:
        """Exact-match admission: org, role, label and key must all agree."""
        if identity.org not in self.orgs:
            return False
        return self._by_rendered.get(identity.rendered) == identity

    def identities_for(self, org: str, role: Role) -> tuple[Identity, ...]:
        return tuple(i for i in self.identities if i.org == org and i.role == role)


def registry_admit(registry: ConsortiumRegistry, identity: Identity) -> bool:
    return registry.admit(identity)


class RegistryBuilder:
    """Collects orgs and identities during genesis construction."""

    def __init__(self) -> None:
        self._orgs: list[str] = []
        self._identities: list[Identity] = []
        self._seen: set[str] = set()

    def register_org(self, org: str) -> None:
        if org in self._orgs:
            raise DuplicateIdentity(f"org already registered: {org}")
        self._orgs.append(org)

    def generate(
        self, org: str, role: Role, label: str, *, seed: bytes | None = None
    ) -> tuple[Identity, SigningKey]:
        if org not in self._orgs:
            raise UnknownOrg(org)
        identity, key = generate_identity(org, role, label, seed=seed)
        if identity.rendered in self._seen:
            raise DuplicateIdentity(identity.rendered)
        self._seen.add(identity.rendered)
        self._identities.append(identity)
        return identity, key

    def freeze(self) -> ConsortiumRegistry:
        return ConsortiumRegistry(orgs=tuple(self._orgs), identities=tuple(self._identities))
