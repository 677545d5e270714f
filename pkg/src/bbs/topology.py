"""Build and drive a full consortium in one process.

``build_topology`` turns a genesis configuration into live runtimes: one
peer per declared peer node, one orderer, one client core per declared
client, all wired over either the simulated transport (deterministic,
virtual time) or loopback sockets (wall clock). The returned Topology is
the single handle tests, benchmarks and the CLI drive.

With the simulated transport, application code that blocks (invoking a
transaction, querying) must run inside the scheduler; ``Topology.call``
and ``spawn_call``/``drain`` wrap that, and are direct calls under
sockets, so the same test body works on both transports.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .config import (
    BuiltIdentities,
    GenesisConfig,
    build_identities,
    make_genesis_block,
    peer_secret_for,
)
from .errors import BbsError, ConfigError
from .identity import Role
from .ledger import Block
from .netsim import (
    Env,
    LinkParams,
    RealEnv,
    SimEnv,
    SimKernel,
    SimTransport,
)
from .node import ClientCore, OrdererCore, PeerCore


@dataclass
class _CallBox:
    done: bool = False
    result: object = None
    error: BaseException | None = None

    def unwrap(self) -> object:
        if self.error is not None:
            raise self.error
        if not self.done:
            raise BbsError("simulated call never completed")
        return self.result


class Topology:
    """Every runtime of one consortium, plus fault and time controls."""

    def __init__(
        self,
        config: GenesisConfig,
        built: BuiltIdentities,
        genesis_block: Block,
        transport: str,
        workdir: Path,
    ) -> None:
        self.config = config
        self.built = built
        self.registry = built.registry
        self.genesis_block = genesis_block
        self.transport = transport
        self.workdir = Path(workdir)
        self.kernel: SimKernel | None = None
        self.sim_transport: SimTransport | None = None
        self.envs: dict[str, Env] = {}
        self.peers: dict[str, PeerCore] = {}  # org -> peer core (first peer)
        self.peer_cores: dict[str, PeerCore] = {}  # node id -> core
        self.clients: dict[str, ClientCore] = {}  # org -> client core (first client)
        self.client_cores: dict[str, ClientCore] = {}
        self.orderer: OrdererCore | None = None
        self._call_seq = itertools.count(1)

    # -- lookups --

    def peer(self, org: str) -> PeerCore:
        try:
            return self.peers[org]
        except KeyError:
            raise ConfigError(f"org {org} has no peer in this topology") from None

    def client(self, org: str) -> ClientCore:
        try:
            return self.clients[org]
        except KeyError:
            raise ConfigError(f"org {org} has no client in this topology") from None

    def peer_id(self, org: str) -> str:
        return self.peer(org).node_id

    @property
    def runtime_count(self) -> int:
        return len(self.peer_cores) + len(self.client_cores) + (1 if self.orderer else 0)

    # -- driving blocking application code --

    def spawn_call(self, fn, *args, name: str = "", **kwargs) -> _CallBox:
        """Start ``fn(*args, **kwargs)`` as schedulable work; result lands in the box."""
        box = _CallBox()

        def runner() -> None:
            try:
                box.result = fn(*args, **kwargs)
                box.done = True
            except BaseException as exc:
                box.error = exc
                box.done = True

        label = name or f"call-{next(self._call_seq)}"
        if self.kernel is not None:
            self.kernel.spawn(runner, label)
        else:
            import threading

            thread = threading.Thread(target=runner, name=label)
            thread.start()
            box.thread = thread  # type: ignore[attr-defined]
        return box

    def drain(self, max_ms: int | None = None) -> list[str]:
        """Let spawned work finish. Returns new trace lines (sim only)."""
        if self.kernel is not None:
            return self.kernel.run_until_quiescent(max_ms=max_ms)
        return []

    def call(self, fn, *args, name: str = "", **kwargs) -> object:
        """Run blocking application code to completion on this topology."""
        box = self.spawn_call(fn, *args, name=name, **kwargs)
        if self.kernel is not None:
            self.kernel.run_until_quiescent()
        else:
            box.thread.join()  # type: ignore[attr-defined]
        return box.unwrap()

    def run_until_quiescent(self, max_ms: int | None = None) -> list[str]:
        if self.kernel is None:
            raise BbsError("virtual time control requires the simulated transport")
        return self.kernel.run_until_quiescent(max_ms=max_ms)

    def run_for(self, duration_ms: int) -> list[str]:
        if self.kernel is None:
            raise BbsError("virtual time control requires the simulated transport")
        return self.kernel.run_for(duration_ms)

    @property
    def trace(self) -> list[str]:
        if self.kernel is None:
            return []
        return self.kernel.trace

    def now_ms(self) -> int:
        if self.kernel is not None:
            return self.kernel.now_us // 1000
        env = next(iter(self.envs.values()))
        return env.now_ms()

    # -- faults --

    def _require_sim(self) -> SimTransport:
        if self.sim_transport is None:
            raise BbsError("fault injection requires the simulated transport")
        return self.sim_transport

    def set_link(self, src: str, dst: str, params: LinkParams) -> None:
        self._require_sim().set_link(src, dst, params)

    def set_peer_link(self, src_org: str, dst_org: str, params: LinkParams) -> None:
        """Cap the directed link between two orgs' peers (and its ack path)."""
        transport = self._require_sim()
        transport.set_link(self.peer_id(src_org), self.peer_id(dst_org), params)

    def partition_peers(self, org_a: str, org_b: str) -> None:
        self._require_sim().partition(self.peer_id(org_a), self.peer_id(org_b))

    def heal_peers(self, org_a: str, org_b: str) -> None:
        self._require_sim().heal(self.peer_id(org_a), self.peer_id(org_b))

    def stop_orderer(self) -> None:
        """Crash-stop the ordering service."""
        if self.orderer is None:
            return
        self.envs[self.orderer.node_id].close()

    def stop_peer(self, org: str) -> None:
        core = self.peer(org)
        self.envs[core.node_id].close()
        core.close()

    # -- teardown --

    def stop(self) -> None:
        if self.kernel is not None:
            self.kernel.shutdown()
        for env in self.envs.values():
            env.close()
        for core in self.peer_cores.values():
            core.close()


def _parse_listen(node_id: str, listen: str) -> tuple[str, int]:
    host, _, port = listen.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"{node_id}: listen address must be host:port")
    return (host, int(port))


def standalone_runtime(
    config: GenesisConfig,
    node_id: str,
    workdir: Path,
) -> tuple[RealEnv, PeerCore | OrdererCore]:
    """Build one node's runtime for multi-process (socket) deployments.

    Every node in the config must declare a listen address, because this
    process discovers its peers only through the static address book.
    """
    if config.transport != "socket":
        raise ConfigError("standalone runtimes require the socket transport")
    built = build_identities(config)
    genesis_block = make_genesis_block(config, built)

    address_book: dict[str, tuple[str, int]] = {}
    own_spec = None
    own_role: Role | None = None
    own_org = None
    peers_by_org: dict[str, str] = {}
    peer_ids: list[str] = []
    for org in config.orgs:
        for role, specs in (
            (Role.PEER, org.peers),
            (Role.CLIENT, org.clients),
            (Role.ORDERER, org.orderers),
        ):
            for spec in specs:
                rendered = f"{org.name}/{role.value}/{spec.label}"
                if rendered == node_id:
                    own_spec, own_role, own_org = spec, role, org.name
                elif not spec.listen:
                    raise ConfigError(
                        f"{rendered}: every other node needs an explicit listen "
                        "address for standalone operation"
                    )
                if spec.listen:
                    address_book[rendered] = _parse_listen(rendered, spec.listen)
                if role is Role.PEER:
                    peer_ids.append(rendered)
                    peers_by_org.setdefault(org.name, rendered)
    if own_spec is None or own_role is None:
        raise ConfigError(f"{node_id} is not declared in this config")
    if own_role is Role.CLIENT:
        raise ConfigError("clients are driven by 'share' and 'bench', not 'node run'")

    identity = next(
        i
        for i in built.registry.identities_for(own_org, own_role)
        if i.label == own_spec.label
    )
    bind = (
        _parse_listen(node_id, own_spec.listen)
        if own_spec.listen
        else ("127.0.0.1", 0)
    )
    env = RealEnv(identity.rendered, address_book, bind)
    if own_role is Role.PEER:
        core: PeerCore | OrdererCore = PeerCore(
            env=env,
            identity=identity,
            signing_key=built.key_of(identity.rendered),
            registry=built.registry,
            contract_config=config.contract,
            genesis_block=genesis_block,
            data_dir=Path(workdir) / identity.rendered.replace("/", "_"),
            peer_secret=peer_secret_for(config.seed, identity.rendered),
            peers_by_org=peers_by_org,
        )
    else:
        core = OrdererCore(
            env=env,
            identity=identity,
            signing_key=built.key_of(identity.rendered),
            registry=built.registry,
            genesis_block=genesis_block,
            peer_ids=peer_ids,
            batch_size=config.batch_size,
            batch_timeout_ms=config.batch_timeout_ms,
        )
    core.start()
    return env, core


def build_topology(
    config: GenesisConfig,
    workdir: Path,
    *,
    transport: str | None = None,
    sim_seed: str | None = None,
) -> Topology:
    """Instantiate all runtimes at the genesis block and start them."""
    kind = transport if transport is not None else config.transport
    if kind not in ("sim", "socket"):
        raise ConfigError(f"unknown transport {kind!r}")
    built = build_identities(config)
    genesis_block = make_genesis_block(config, built)
    topo = Topology(config, built, genesis_block, kind, workdir)

    if kind == "sim":
        topo.kernel = SimKernel(seed=sim_seed if sim_seed is not None else config.seed)
        topo.sim_transport = SimTransport(topo.kernel, default_link=config.default_link)

    address_book: dict[str, tuple[str, int]] = {}

    def make_env(node_id: str, listen: str) -> Env:
        if kind == "sim":
            assert topo.kernel is not None and topo.sim_transport is not None
            return SimEnv(topo.kernel, topo.sim_transport, node_id)
        bind = _parse_listen(node_id, listen) if listen else ("127.0.0.1", 0)
        return RealEnv(node_id, address_book, bind)

    peers_by_org: dict[str, str] = {}
    for org in config.orgs:
        if org.peers:
            peers_by_org[org.name] = f"{org.name}/peer/{org.peers[0].label}"

    orderer_identity = built.orderer()
    peer_ids: list[str] = []

    # Peers and the orderer first (listeners must exist before clients send).
    for org in config.orgs:
        for spec in org.peers:
            identity = next(
                i
                for i in built.registry.identities_for(org.name, Role.PEER)
                if i.label == spec.label
            )
            env = make_env(identity.rendered, spec.listen)
            data_dir = topo.workdir / identity.rendered.replace("/", "_")
            core = PeerCore(
                env=env,
                identity=identity,
                signing_key=built.key_of(identity.rendered),
                registry=built.registry,
                contract_config=config.contract,
                genesis_block=genesis_block,
                data_dir=data_dir,
                peer_secret=peer_secret_for(config.seed, identity.rendered),
                peers_by_org=peers_by_org,
            )
            topo.envs[identity.rendered] = env
            topo.peer_cores[identity.rendered] = core
            topo.peers.setdefault(org.name, core)
            peer_ids.append(identity.rendered)

    orderer_spec = next(
        spec for org in config.orgs for spec in org.orderers
    )
    orderer_env = make_env(orderer_identity.rendered, orderer_spec.listen)
    topo.envs[orderer_identity.rendered] = orderer_env
    topo.orderer = OrdererCore(
        env=orderer_env,
        identity=orderer_identity,
        signing_key=built.key_of(orderer_identity.rendered),
        registry=built.registry,
        genesis_block=genesis_block,
        peer_ids=peer_ids,
        batch_size=config.batch_size,
        batch_timeout_ms=config.batch_timeout_ms,
    )

    for org in config.orgs:
        for spec in org.clients:
            identity = next(
                i
                for i in built.registry.identities_for(org.name, Role.CLIENT)
                if i.label == spec.label
            )
            env = make_env(identity.rendered, spec.listen)
            core = ClientCore(
                env=env,
                identity=identity,
                registry=built.registry,
                peers_by_org=peers_by_org,
                orderer_id=orderer_identity.rendered,
            )
            topo.envs[identity.rendered] = env
            topo.client_cores[identity.rendered] = core
            topo.clients.setdefault(org.name, core)

    if topo.sim_transport is not None:
        for override in config.link_overrides:
            topo.sim_transport.set_link(override.src, override.dst, override.params)

    for core in topo.peer_cores.values():
        core.start()
    topo.orderer.start()
    for client in topo.client_cores.values():
        client.start()
        client.subscribe()
    if topo.kernel is not None:
        # Deliver the subscription messages before callers begin work.
        topo.kernel.run_until_quiescent()
    return topo
