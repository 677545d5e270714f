"""Genesis configuration: YAML schema, key derivation, genesis block.

A consortium is described by one YAML document: channel name, a seed for
deterministic key material, organizations with their peer/client/orderer
nodes, the contract's endorsement policy configuration, orderer batching
parameters, and link characteristics for the simulated network.

The genesis block's single transaction carries the canonical encoding of
the registry and contract configuration (hex, since transaction arguments
are strings), so an exported chain is self-describing: an offline auditor
recovers the verification keys and policies from block 0 alone.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import yaml

from .encoding import canonical, decode, encode
from .errors import ConfigError
from .identity import ConsortiumRegistry, Identity, Role, RegistryBuilder, SigningKey
from .ledger import (
    Block,
    BlockHeader,
    TxValidity,
    ZERO_HASH,
    data_digest,
    genesis_payload_of,
    hash_bytes,
)
from .netsim import LinkParams
from .txflow import (
    ContractConfig,
    NamespaceTemplate,
    Proposal,
    ReadWriteSet,
    Transaction,
    parse_policy,
    policy_orgs,
)

DEFAULT_TEMPLATES = (
    ("file", "AND(@Owner)"),
    ("event", "AND(@Sender,@Receiver)"),
)


@canonical
@dataclass(frozen=True)
class GenesisPayload:
    """Everything block 0 pins down for the life of the channel."""

    channel: str
    registry: ConsortiumRegistry
    contract: ContractConfig
    batch_size: int
    batch_timeout_ms: int


@dataclass(frozen=True)
class NodeSpec:
    label: str
    listen: str = ""  # "host:port" for socket transport; "" = ephemeral/sim
    transport: str = ""  # "" = inherit the channel-wide transport kind


@dataclass(frozen=True)
class OrgSpec:
    name: str
    peers: tuple[NodeSpec, ...] = ()
    clients: tuple[NodeSpec, ...] = ()
    orderers: tuple[NodeSpec, ...] = ()


@dataclass(frozen=True)
class LinkOverride:
    src: str
    dst: str
    params: LinkParams


@dataclass(frozen=True)
class GenesisConfig:
    channel: str
    seed: str
    orgs: tuple[OrgSpec, ...]
    contract: ContractConfig
    batch_size: int = 10
    batch_timeout_ms: int = 200
    default_link: LinkParams = LinkParams(bandwidth_bps=400 * 1_000_000, latency_us=1000)
    link_overrides: tuple[LinkOverride, ...] = ()
    transport: str = "sim"

    def org_names(self) -> tuple[str, ...]:
        return tuple(o.name for o in self.orgs)

    def node_ids(self) -> list[str]:
        ids = []
        for org in self.orgs:
            for spec in org.peers:
                ids.append(f"{org.name}/peer/{spec.label}")
            for spec in org.clients:
                ids.append(f"{org.name}/client/{spec.label}")
            for spec in org.orderers:
                ids.append(f"{org.name}/orderer/{spec.label}")
        return ids


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def _parse_nodes(raw: object, org: str, kind: str) -> tuple[NodeSpec, ...]:
    if raw is None:
        return ()
    if not isinstance(raw, list):
        raise ConfigError(f"{org}.{kind} must be a list")
    specs = []
    for item in raw:
        if isinstance(item, str):
            specs.append(NodeSpec(label=item))
        elif isinstance(item, dict):
            label = item.get("label")
            if not isinstance(label, str) or not label:
                raise ConfigError(f"{org}.{kind} entry needs a label")
            listen = item.get("listen", "")
            if not isinstance(listen, str):
                raise ConfigError(f"{org}.{kind}.{label}: listen must be a string")
            node_transport = item.get("transport", "")
            if node_transport not in ("", "sim", "socket"):
                raise ConfigError(
                    f"{org}.{kind}.{label}: transport must be 'sim' or 'socket'"
                )
            specs.append(
                NodeSpec(label=label, listen=listen, transport=node_transport)
            )
        else:
            raise ConfigError(f"{org}.{kind} entries must be strings or mappings")
    return tuple(specs)


def _parse_link_params(raw: dict, where: str, base: LinkParams) -> LinkParams:
    bandwidth = raw.get("bandwidth_mbytes_per_sec")
    latency = raw.get("latency_ms")
    drop = raw.get("drop_rate")
    try:
        bps = base.bandwidth_bps if bandwidth is None else int(float(bandwidth) * 1_000_000)
        lat = base.latency_us if latency is None else int(float(latency) * 1000)
        rate = base.drop_rate if drop is None else float(drop)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: bad link numbers") from exc
    if bps <= 0 or lat < 0 or not 0.0 <= rate <= 1.0:
        raise ConfigError(f"{where}: link parameters out of range")
    return LinkParams(bandwidth_bps=bps, latency_us=lat, drop_rate=rate)


def parse_genesis(doc: dict) -> GenesisConfig:
    if not isinstance(doc, dict):
        raise ConfigError("genesis document must be a mapping")
    channel = doc.get("channel")
    if not isinstance(channel, str) or not channel:
        raise ConfigError("channel must be a non-empty string")
    seed = doc.get("seed")
    if seed is None:
        raise ConfigError("seed is required (key material is derived from it)")
    seed = str(seed)

    raw_orgs = doc.get("orgs")
    if not isinstance(raw_orgs, list) or not raw_orgs:
        raise ConfigError("orgs must be a non-empty list")
    orgs = []
    for raw in raw_orgs:
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str):
            raise ConfigError("each org needs a name")
        name = raw["name"]
        orgs.append(
            OrgSpec(
                name=name,
                peers=_parse_nodes(raw.get("peers"), name, "peers"),
                clients=_parse_nodes(raw.get("clients"), name, "clients"),
                orderers=_parse_nodes(raw.get("orderers"), name, "orderers"),
            )
        )
    names = [o.name for o in orgs]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate org names")
    orderer_count = sum(len(o.orderers) for o in orgs)
    if orderer_count != 1:
        raise ConfigError(f"exactly one orderer required, found {orderer_count}")
    for org in orgs:
        if not org.peers:
            raise ConfigError(f"org {org.name} has no peer")
    if sum(len(o.clients) for o in orgs) < 1:
        raise ConfigError("at least one client required")

    contract_raw = doc.get("contract") or {}
    if not isinstance(contract_raw, dict):
        raise ConfigError("contract section must be a mapping")
    default_policy = contract_raw.get("default_policy")
    if default_policy is None:
        default_policy = "AND(" + ",".join(names[: min(2, len(names))]) + ")"
    if not isinstance(default_policy, str):
        raise ConfigError("contract.default_policy must be a string")
    templates_raw = contract_raw.get("templates")
    if templates_raw is None:
        templates_raw = dict(DEFAULT_TEMPLATES)
    if not isinstance(templates_raw, dict):
        raise ConfigError("contract.templates must be a mapping")
    templates = tuple(
        NamespaceTemplate(namespace=str(ns), template=str(expr))
        for ns, expr in sorted(templates_raw.items())
    )
    contract = ContractConfig(default_policy=default_policy, templates=templates)
    # Policies must parse, and every org they mention must exist.
    for org_name in policy_orgs(parse_policy(default_policy)):
        if org_name not in names:
            raise ConfigError(f"default_policy references unknown org {org_name}")
    for tpl in templates:
        for operand in policy_orgs(parse_policy(tpl.template)):
            if not operand.startswith("@") and operand not in names:
                raise ConfigError(
                    f"template {tpl.namespace!r} references unknown org {operand}"
                )

    orderer_raw = doc.get("orderer") or {}
    if not isinstance(orderer_raw, dict):
        raise ConfigError("orderer section must be a mapping")
    batch_size = orderer_raw.get("batch_size", 10)
    batch_timeout_ms = orderer_raw.get("batch_timeout_ms", 200)
    if not isinstance(batch_size, int) or batch_size < 1:
        raise ConfigError("orderer.batch_size must be a positive integer")
    if not isinstance(batch_timeout_ms, int) or batch_timeout_ms < 0:
        raise ConfigError("orderer.batch_timeout_ms must be a non-negative integer")

    links_raw = doc.get("links") or {}
    if not isinstance(links_raw, dict):
        raise ConfigError("links section must be a mapping")
    default_link = _parse_link_params(
        links_raw.get("default") or {}, "links.default", GenesisConfig.default_link
    )
    overrides = []
    node_ids = None
    for i, raw in enumerate(links_raw.get("overrides") or []):
        if not isinstance(raw, dict):
            raise ConfigError(f"links.overrides[{i}] must be a mapping")
        src, dst = raw.get("src"), raw.get("dst")
        if not isinstance(src, str) or not isinstance(dst, str):
            raise ConfigError(f"links.overrides[{i}] needs src and dst node ids")
        overrides.append(
            LinkOverride(
                src=src,
                dst=dst,
                params=_parse_link_params(raw, f"links.overrides[{i}]", default_link),
            )
        )

    transport = doc.get("transport", "sim")
    if transport not in ("sim", "socket"):
        raise ConfigError(f"transport must be 'sim' or 'socket', got {transport!r}")
    # All nodes must run one transport kind; a channel cannot mix simulated
    # and socket nodes because they would share no message fabric.
    for org_spec in orgs:
        for spec in org_spec.peers + org_spec.clients + org_spec.orderers:
            if spec.transport and spec.transport != transport:
                raise ConfigError(
                    f"{org_spec.name}/{spec.label}: node transport "
                    f"{spec.transport!r} conflicts with channel transport "
                    f"{transport!r}; mixed transports are not supported"
                )

    config = GenesisConfig(
        channel=channel,
        seed=seed,
        orgs=tuple(orgs),
        contract=contract,
        batch_size=batch_size,
        batch_timeout_ms=batch_timeout_ms,
        default_link=default_link,
        link_overrides=tuple(overrides),
        transport=transport,
    )
    node_ids = set(config.node_ids())
    for ov in config.link_overrides:
        for endpoint in (ov.src, ov.dst):
            if endpoint not in node_ids:
                raise ConfigError(f"link override references unknown node {endpoint}")
    return config


def load_genesis(path: Path) -> GenesisConfig:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read genesis file: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"genesis file is not valid YAML: {exc}") from exc
    return parse_genesis(doc)


# ---------------------------------------------------------------------------
# Key derivation and genesis block
# ---------------------------------------------------------------------------


def _master_seed(seed: str) -> bytes:
    return hashlib.sha256(b"bbs/genesis-seed/" + seed.encode()).digest()


def _identity_seed(master: bytes, rendered: str) -> bytes:
    return hashlib.sha256(master + b"/identity/" + rendered.encode()).digest()


def peer_secret_for(config_seed: str, rendered: str) -> bytes:
    """Local entropy root of one peer; never leaves the node."""
    master = _master_seed(config_seed)
    return hashlib.sha256(master + b"/peer-secret/" + rendered.encode()).digest()


@dataclass(frozen=True)
class BuiltIdentities:
    registry: ConsortiumRegistry
    signing_keys: dict[str, SigningKey]  # rendered -> key

    def key_of(self, rendered: str) -> SigningKey:
        return self.signing_keys[rendered]

    def orderer(self) -> Identity:
        for identity in self.registry.identities:
            if identity.role is Role.ORDERER:
                return identity
        raise ConfigError("registry holds no orderer identity")


def build_identities(config: GenesisConfig) -> BuiltIdentities:
    master = _master_seed(config.seed)
    builder = RegistryBuilder()
    keys: dict[str, SigningKey] = {}
    for org in config.orgs:
        builder.register_org(org.name)
    for org in config.orgs:
        for role, specs in (
            (Role.PEER, org.peers),
            (Role.CLIENT, org.clients),
            (Role.ORDERER, org.orderers),
        ):
            for spec in specs:
                rendered = f"{org.name}/{role.value}/{spec.label}"
                identity, key = builder.generate(
                    org.name, role, spec.label, seed=_identity_seed(master, rendered)
                )
                keys[identity.rendered] = key
    return BuiltIdentities(registry=builder.freeze(), signing_keys=keys)


def make_genesis_block(config: GenesisConfig, built: BuiltIdentities) -> Block:
    payload = GenesisPayload(
        channel=config.channel,
        registry=built.registry,
        contract=config.contract,
        batch_size=config.batch_size,
        batch_timeout_ms=config.batch_timeout_ms,
    )
    orderer = built.orderer()
    proposal = Proposal(
        proposer=orderer,
        function="genesis",
        args=(encode(payload).hex(),),
        timestamp_ms=0,
        nonce=hash_bytes(b"bbs/genesis-nonce/" + config.channel.encode())[:16],
    )
    tx = Transaction(
        proposal=proposal,
        rwset=ReadWriteSet(reads=(), public_writes=(), private_writes=(), effects=()),
        endorsements=(),
    )
    header = BlockHeader(height=0, prev_hash=ZERO_HASH, data_hash=data_digest([tx]))
    signature = built.key_of(orderer.rendered).sign(encode(header))
    return Block(
        header=header,
        transactions=(tx,),
        validity=(TxValidity.VALID,),
        orderer_sig=signature,
    )


def genesis_payload_from_block(block: Block) -> GenesisPayload:
    """Recover the channel configuration pinned by block 0."""
    arg = genesis_payload_of(block)
    try:
        payload = decode(bytes.fromhex(arg))
    except ValueError as exc:
        raise ConfigError(f"genesis payload is not hex: {exc}") from exc
    if not isinstance(payload, GenesisPayload):
        raise ConfigError("genesis transaction does not carry a channel configuration")
    return payload
