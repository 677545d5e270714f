"""Execute-order-validate transaction pipeline.

Pure pieces of the flow live here: proposals, read/write sets, endorsement
construction and verification, AND/OR endorsement policies with three
override levels, FIFO batching into signed blocks, and block validation
(policy check, then MVCC version check). Peer and orderer runtimes in
``node`` drive these against their own state.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Any, Callable, Iterable

from .encoding import canonical, decode, encode
from .errors import (
    EncodingError,
    MismatchedEndorsements,
    PolicyParseError,
)
from .identity import ConsortiumRegistry, Identity, Role, Signature, SigningKey, verify
from .ledger import (
    Block,
    BlockHeader,
    BlockHeader as _Header,
    StateKey,
    TxValidity,
    Version,
    VersionedValue,
    data_digest,
    hash_bytes,
    header_digest,
)

StateGetter = Callable[[StateKey], "VersionedValue | None"]

# Namespaces that never contribute a key-level policy of their own: policy
# declarations ride along under the policy of the entity keys they accompany.
_INFRA_NAMESPACES = frozenset({"keypolicy", "collection", "pdc"})

KEYPOLICY_NAMESPACE = "keypolicy"


def keypolicy_key(target: StateKey) -> StateKey:
    return StateKey(KEYPOLICY_NAMESPACE, target.rendered)


def private_state_key(collection_id: str, key: StateKey) -> StateKey:
    """World-state key under which a private write's hash is recorded."""
    return StateKey("pdc", f"{collection_id}/{key.rendered}")


# --- endorsement policies ------------------------------------------------------


@canonical
@dataclass(frozen=True)
class PolicyOrg:
    org: str

    def satisfied(self, orgs: set[str]) -> bool:
        return self.org in orgs

    def render(self) -> str:
        return self.org


@canonical
@dataclass(frozen=True)
class AllOf:
    children: tuple

    def __post_init__(self) -> None:
        if not self.children:
            raise PolicyParseError("AND() needs at least one operand")

    def satisfied(self, orgs: set[str]) -> bool:
        return all(c.satisfied(orgs) for c in self.children)

    def render(self) -> str:
        return "AND(" + ",".join(c.render() for c in self.children) + ")"


@canonical
@dataclass(frozen=True)
class AnyOf:
    children: tuple

    def __post_init__(self) -> None:
        if not self.children:
            raise PolicyParseError("OR() needs at least one operand")

    def satisfied(self, orgs: set[str]) -> bool:
        return any(c.satisfied(orgs) for c in self.children)

    def render(self) -> str:
        return "OR(" + ",".join(c.render() for c in self.children) + ")"


PolicyNode = Any  # PolicyOrg | AllOf | AnyOf


def policy_orgs(node: PolicyNode) -> set[str]:
    """Every org named anywhere in a policy tree."""
    if isinstance(node, PolicyOrg):
        return {node.org}
    orgs: set[str] = set()
    for child in node.children:
        orgs |= policy_orgs(child)
    return orgs


@canonical
class PolicyLevel(enum.Enum):
    CHAINCODE = "chaincode"
    COLLECTION = "collection"
    KEY = "key"


@canonical
@dataclass(frozen=True)
class EndorsementPolicy:
    expression: PolicyNode
    level: PolicyLevel

    def satisfied(self, orgs: Iterable[str]) -> bool:
        return self.expression.satisfied(set(orgs))

    def render(self) -> str:
        return self.expression.render()


def parse_policy(text: str) -> PolicyNode:
    """Parse 'AND(Org1,OR(Org2,Org3))' style expressions into a policy tree."""
    pos = 0

    def error(msg: str) -> PolicyParseError:
        return PolicyParseError(f"{msg} at offset {pos} in {text!r}")

    def skip_ws() -> None:
        nonlocal pos
        while pos < len(text) and text[pos].isspace():
            pos += 1

    def parse_node() -> PolicyNode:
        nonlocal pos
        skip_ws()
        start = pos
        while pos < len(text) and (text[pos].isalnum() or text[pos] in "_-@"):
            pos += 1
        word = text[start:pos]
        if not word:
            raise error("expected org name or AND/OR")
        skip_ws()
        if word in ("AND", "OR"):
            if pos >= len(text) or text[pos] != "(":
                raise error(f"expected '(' after {word}")
            pos += 1
            children = [parse_node()]
            skip_ws()
            while pos < len(text) and text[pos] == ",":
                pos += 1
                children.append(parse_node())
                skip_ws()
            if pos >= len(text) or text[pos] != ")":
                raise error("expected ')'")
            pos += 1
            cls = AllOf if word == "AND" else AnyOf
            return cls(tuple(children))
        return PolicyOrg(word)

    node = parse_node()
    skip_ws()
    if pos != len(text):
        raise PolicyParseError(f"trailing input at offset {pos} in {text!r}")
    return node


# --- contract configuration ------------------------------------------------------


@canonical
@dataclass(frozen=True)
class NamespaceTemplate:
    """Key-level policy template for newly written keys of one namespace.

    ``template`` is a policy expression where @FieldName operands are
    substituted with the org held by that field of the written entity, e.g.
    "AND(@Sender,@Receiver)" on the event namespace.
    """

    namespace: str
    template: str


@canonical
@dataclass(frozen=True)
class ContractConfig:
    default_policy: str  # chaincode-level policy expression text
    templates: tuple  # of NamespaceTemplate

    @cached_property
    def default_node(self) -> PolicyNode:
        return parse_policy(self.default_policy)

    @cached_property
    def template_map(self) -> dict[str, str]:
        return {t.namespace: t.template for t in self.templates}


def _instantiate_template(template: str, entity: Any) -> PolicyNode:
    node = parse_policy(template)

    def subst(n: PolicyNode) -> PolicyNode:
        if isinstance(n, PolicyOrg):
            if n.org.startswith("@"):
                field = n.org[1:]
                value = getattr(entity, field, None)
                if not isinstance(value, str) or not value:
                    raise PolicyParseError(f"template field @{field} unresolvable")
                return PolicyOrg(value)
            return n
        return replace(n, children=tuple(subst(c) for c in n.children))

    return subst(node)


# --- proposals, read/write sets, endorsements ------------------------------------


@canonical
@dataclass(frozen=True)
class Proposal:
    proposer: Identity
    function: str
    args: tuple  # of str
    timestamp_ms: int
    nonce: bytes  # 16 random bytes; replay guard per proposer

    def digest(self) -> bytes:
        return hash_bytes(encode(self))

    @property
    def txid(self) -> str:
        return self.digest().hex()


@canonical
@dataclass(frozen=True)
class ReadEntry:
    key: StateKey
    version: Version | None  # None = key absent when read


@canonical
@dataclass(frozen=True)
class WriteEntry:
    key: StateKey
    value: bytes


@canonical
@dataclass(frozen=True)
class PrivateWriteEntry:
    collection_id: str
    key: StateKey
    value_hash: bytes

    def public_state_key(self) -> StateKey:
        return private_state_key(self.collection_id, self.key)


@canonical
@dataclass(frozen=True)
class EffectNote:
    """Declared side effect executed during endorsement (encrypt/transfer)."""

    kind: str
    target: str
    digest: bytes
    size: int


@canonical
@dataclass(frozen=True)
class ReadWriteSet:
    reads: tuple  # of ReadEntry
    public_writes: tuple  # of WriteEntry
    private_writes: tuple  # of PrivateWriteEntry
    effects: tuple  # of EffectNote


def rwset_digest(rwset: ReadWriteSet) -> bytes:
    return hash_bytes(encode(rwset))


@canonical
@dataclass(frozen=True)
class Endorsement:
    endorser: Identity
    result_hash: bytes
    signature: Signature


def endorsement_message(proposal_digest: bytes, result_hash: bytes) -> bytes:
    return encode(("endorsement", proposal_digest, result_hash))


def make_endorsement(key: SigningKey, proposal_digest: bytes, rwset: ReadWriteSet) -> Endorsement:
    result_hash = rwset_digest(rwset)
    sig = key.sign(endorsement_message(proposal_digest, result_hash))
    return Endorsement(endorser=key.identity, result_hash=result_hash, signature=sig)


def verify_endorsement(endorsement: Endorsement, proposal_digest: bytes) -> bool:
    message = endorsement_message(proposal_digest, endorsement.result_hash)
    return verify(endorsement.endorser, message, endorsement.signature)


@canonical
@dataclass(frozen=True)
class Transaction:
    proposal: Proposal
    rwset: ReadWriteSet
    endorsements: tuple  # of Endorsement

    @property
    def txid(self) -> str:
        return self.proposal.txid


def assemble(proposal: Proposal, responses: list[tuple[ReadWriteSet, Endorsement]]) -> Transaction:
    """Build a transaction iff every endorser returned the same result."""
    if not responses:
        raise MismatchedEndorsements("no endorsement responses")
    rwset, first = responses[0]
    hashes = {e.result_hash for _, e in responses}
    if len(hashes) != 1 or first.result_hash != rwset_digest(rwset):
        raise MismatchedEndorsements(
            f"endorsers disagree on execution result for {proposal.function}"
        )
    return Transaction(
        proposal=proposal,
        rwset=rwset,
        endorsements=tuple(e for _, e in responses),
    )


# --- policy resolution ------------------------------------------------------------


def resolve_policy(
    rwset: ReadWriteSet,
    config: ContractConfig,
    state_get: StateGetter | None = None,
) -> EndorsementPolicy:
    """Most-specific applicable policy for a transaction's write set.

    Key level: for each written entity key, a committed ``keypolicy:`` entry
    (declared by an earlier transaction) wins; otherwise a namespace template
    instantiated from the written value applies. Declarations written by this
    very transaction take effect for later transactions only. If any written
    key yields a key-level policy the transaction is governed by the
    conjunction of those; otherwise private writes pull in their collections'
    policies; otherwise the chaincode default applies.

    Raises PolicyParseError when a forged write set defeats resolution
    (undecodable entity bytes, bad template field); validation maps that to
    INVALID_OTHER.
    """
    key_nodes: list[PolicyNode] = []
    for w in rwset.public_writes:
        if w.key.namespace in _INFRA_NAMESPACES:
            continue
        declared = state_get(keypolicy_key(w.key)) if state_get else None
        if declared is not None:
            text = decode(declared.value)
            if not isinstance(text, str):
                raise PolicyParseError(f"bad key policy entry for {w.key.rendered}")
            key_nodes.append(parse_policy(text))
            continue
        template = config.template_map.get(w.key.namespace)
        if template is not None:
            try:
                entity = decode(w.value)
            except EncodingError as exc:
                raise PolicyParseError(f"undecodable entity under {w.key.rendered}") from exc
            key_nodes.append(_instantiate_template(template, entity))
    if key_nodes:
        expr = key_nodes[0] if len(key_nodes) == 1 else AllOf(tuple(key_nodes))
        return EndorsementPolicy(expression=expr, level=PolicyLevel.KEY)

    collection_nodes: list[PolicyNode] = []
    seen: set[str] = set()
    in_tx_collections: dict[str, bytes] = {
        w.key.id: w.value for w in rwset.public_writes if w.key.namespace == "collection"
    }
    for pw in rwset.private_writes:
        if pw.collection_id in seen:
            continue
        seen.add(pw.collection_id)
        raw = in_tx_collections.get(pw.collection_id)
        if raw is None and state_get is not None:
            committed = state_get(StateKey("collection", pw.collection_id))
            raw = committed.value if committed else None
        if raw is None:
            raise PolicyParseError(f"unknown collection {pw.collection_id}")
        cfg = decode(raw)
        text = getattr(cfg, "policy", None)
        if not isinstance(text, str):
            raise PolicyParseError(f"malformed collection config {pw.collection_id}")
        collection_nodes.append(parse_policy(text))
    if collection_nodes:
        expr = collection_nodes[0] if len(collection_nodes) == 1 else AllOf(tuple(collection_nodes))
        return EndorsementPolicy(expression=expr, level=PolicyLevel.COLLECTION)

    return EndorsementPolicy(expression=config.default_node, level=PolicyLevel.CHAINCODE)


# --- validation --------------------------------------------------------------------


def _has_duplicates(keys: list[str]) -> bool:
    return len(keys) != len(set(keys))


def validate_block(
    block: Block,
    base_get: StateGetter,
    registry: ConsortiumRegistry,
    config: ContractConfig,
    seen_nonces: set[tuple[str, bytes]],
) -> list[TxValidity]:
    """Assign validity flags without executing any contract code.

    Precedence per transaction: structural defects → INVALID_OTHER;
    endorsement signature or policy failure → INVALID_ENDORSEMENT; stale read
    versions or write conflicts against earlier VALID transactions in this
    block → INVALID_MVCC; else VALID. ``seen_nonces`` is not mutated; the
    committer records nonces after the block is applied.
    """
    height = block.header.height
    overlay: dict[str, VersionedValue] = {}
    written_in_block: set[str] = set()
    nonces = set(seen_nonces)
    flags: list[TxValidity] = []

    def view(key: StateKey) -> VersionedValue | None:
        hit = overlay.get(key.rendered)
        return hit if hit is not None else base_get(key)

    for index, tx in enumerate(block.transactions):
        flag = _validate_tx(tx, view, registry, config, nonces, written_in_block)
        nonces.add((tx.proposal.proposer.rendered, tx.proposal.nonce))
        if flag is TxValidity.VALID:
            version = (height, index)
            for w in tx.rwset.public_writes:
                overlay[w.key.rendered] = VersionedValue(w.value, version)
                written_in_block.add(w.key.rendered)
            for pw in tx.rwset.private_writes:
                pk = pw.public_state_key()
                overlay[pk.rendered] = VersionedValue(pw.value_hash, version)
                written_in_block.add(pk.rendered)
        flags.append(flag)
    return flags


def _validate_tx(
    tx: Transaction,
    view: StateGetter,
    registry: ConsortiumRegistry,
    config: ContractConfig,
    nonces: set[tuple[str, bytes]],
    written_in_block: set[str],
) -> TxValidity:
    rwset = tx.rwset
    if not tx.endorsements:
        return TxValidity.INVALID_OTHER
    if not registry.admit(tx.proposal.proposer):
        return TxValidity.INVALID_OTHER
    if (tx.proposal.proposer.rendered, tx.proposal.nonce) in nonces:
        return TxValidity.INVALID_OTHER
    result_hashes = {e.result_hash for e in tx.endorsements}
    if len(result_hashes) != 1 or rwset_digest(rwset) not in result_hashes:
        return TxValidity.INVALID_OTHER
    public_keys = [w.key.rendered for w in rwset.public_writes]
    private_keys = [pw.public_state_key().rendered for pw in rwset.private_writes]
    if _has_duplicates([r.key.rendered for r in rwset.reads]):
        return TxValidity.INVALID_OTHER
    if _has_duplicates(public_keys + private_keys):
        return TxValidity.INVALID_OTHER

    proposal_digest = tx.proposal.digest()
    endorsing_orgs: set[str] = set()
    for e in tx.endorsements:
        if not registry.admit(e.endorser) or e.endorser.role is not Role.PEER:
            return TxValidity.INVALID_ENDORSEMENT
        if not verify_endorsement(e, proposal_digest):
            return TxValidity.INVALID_ENDORSEMENT
        endorsing_orgs.add(e.endorser.org)
    try:
        policy = resolve_policy(rwset, config, view)
    except PolicyParseError:
        return TxValidity.INVALID_OTHER
    if not policy.satisfied(endorsing_orgs):
        return TxValidity.INVALID_ENDORSEMENT

    for read in rwset.reads:
        current = view(read.key)
        current_version = current.version if current is not None else None
        if read.version != current_version:
            return TxValidity.INVALID_MVCC
    for rendered in public_keys + private_keys:
        if rendered in written_in_block:
            return TxValidity.INVALID_MVCC
    return TxValidity.VALID


# --- ordering -----------------------------------------------------------------------


class OrdererBatcher:
    """FIFO batcher: cuts a block at ``batch_size`` or ``timeout_ms``.

    Performs no semantic validation; blocks leave with empty validity flags,
    which committing peers fill in after running validate.
    """

    def __init__(
        self,
        signing_key: SigningKey,
        tip_header: BlockHeader,
        batch_size: int = 10,
        timeout_ms: int = 200,
    ) -> None:
        if signing_key.identity.role is not Role.ORDERER:
            raise MismatchedEndorsements("batcher requires an orderer identity")
        self._key = signing_key
        self._tip = tip_header
        self.batch_size = batch_size
        self.timeout_ms = timeout_ms
        self._pending: list[Transaction] = []
        self._oldest_ms: int | None = None

    def submit(self, tx: Transaction, now_ms: int) -> Block | None:
        self._pending.append(tx)
        if self._oldest_ms is None:
            self._oldest_ms = now_ms
        if len(self._pending) >= self.batch_size:
            return self._cut()
        return None

    def poll(self, now_ms: int) -> Block | None:
        if self._pending and self._oldest_ms is not None:
            if now_ms - self._oldest_ms >= self.timeout_ms:
                return self._cut()
        return None

    def deadline_ms(self) -> int | None:
        if self._oldest_ms is None:
            return None
        return self._oldest_ms + self.timeout_ms

    def _cut(self) -> Block:
        txs = tuple(self._pending)
        self._pending = []
        self._oldest_ms = None
        header = _Header(
            height=self._tip.height + 1,
            prev_hash=header_digest(self._tip),
            data_hash=data_digest(txs),
        )
        self._tip = header
        sig = self._key.sign(encode(header))
        return Block(header=header, transactions=txs, validity=(), orderer_sig=sig)


def finalize_block(block: Block, flags: list[TxValidity]) -> Block:
    """Committed form of an ordered block: validity flags filled in."""
    return replace(block, validity=tuple(flags))
