"""Node runtimes: endorsing/committing peers, the orderer, and clients.

Each runtime is written against the blocking ``Env`` abstraction, so the
same code runs on the simulated lockstep scheduler and on real sockets.
A node is one dispatcher loop reading its inbox; slow work (contract
execution, queries) is handed to spawned workers so endorsement of a long
file transfer never stalls anything else, while block commits stay inline
in the dispatcher to preserve arrival order.

Clients drive the execute-order-validate pipeline: collect endorsements,
assemble a transaction, submit it for ordering, and wait for their peer's
commit notification carrying the validity flag. Peers never originate
proposals; the orderer never executes or validates.
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from pathlib import Path

from . import offstate as offst
from .contract import ContractRuntime, ExecutionContext, check_randomized_policy
from .encoding import canonical, encode
from .encoding import decode
from .errors import (
    AccessDenied,
    BbsError,
    ChainMismatch,
    ContractError,
    InvokeFailed,
    QueryFailed,
    RequestTimeout,
    ShuttingDown,
    Unreachable,
)
from .identity import ConsortiumRegistry, Identity, Role, SigningKey
from .ledger import (
    Block,
    Blockchain,
    ChainFile,
    StateKey,
    TxValidity,
    VersionedValue,
    WorldState,
    apply_block,
    hash_bytes,
    read_chain_file,
    verify_block_signature,
)
from .netsim import Channel, Env, Envelope
from .pdc import PrivatePayload, PrivateStore, collection_state_key
from .txflow import (
    ContractConfig,
    Endorsement,
    OrdererBatcher,
    Proposal,
    ReadWriteSet,
    Transaction,
    assemble,
    finalize_block,
    make_endorsement,
    policy_orgs,
    private_state_key,
    resolve_policy,
    validate_block,
)

# ---------------------------------------------------------------------------
# Wire messages
# ---------------------------------------------------------------------------


@canonical
@dataclass(frozen=True)
class ProposeMsg:
    proposal: Proposal


@canonical
@dataclass(frozen=True)
class EndorseOk:
    rwset: ReadWriteSet
    endorsement: Endorsement
    result: object
    app_error: str  # "" or a recorded application failure code


@canonical
@dataclass(frozen=True)
class EndorseErr:
    code: str
    message: str


@canonical
@dataclass(frozen=True)
class SubmitMsg:
    tx: Transaction


@canonical
@dataclass(frozen=True)
class BlockMsg:
    block: Block


@canonical
@dataclass(frozen=True)
class SubscribeMsg:
    subscriber: str  # node id to push commit notifications to


@canonical
@dataclass(frozen=True)
class CommitEntry:
    txid: str
    validity: TxValidity


@canonical
@dataclass(frozen=True)
class CommitNote:
    height: int
    entries: tuple  # of CommitEntry, block order


@canonical
@dataclass(frozen=True)
class QueryMsg:
    function: str
    args: tuple  # of str


@canonical
@dataclass(frozen=True)
class QueryOk:
    result: object


@canonical
@dataclass(frozen=True)
class QueryErr:
    code: str
    message: str


@canonical
@dataclass(frozen=True)
class PdcPush:
    payload: PrivatePayload


@canonical
@dataclass(frozen=True)
class PdcAck:
    ok: bool


# ---------------------------------------------------------------------------
# Peer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CommittedTx:
    height: int
    index: int
    validity: TxValidity


class PeerCore:
    """Endorsing and committing peer of one organization."""

    def __init__(
        self,
        env: Env,
        identity: Identity,
        signing_key: SigningKey,
        registry: ConsortiumRegistry,
        contract_config: ContractConfig,
        genesis_block: Block,
        data_dir: Path,
        peer_secret: bytes,
        peers_by_org: dict[str, str],
        ack_timeout_ms: int = 20_000,
        disseminate_retries: int = 6,
    ) -> None:
        if identity.role is not Role.PEER:
            raise BbsError("PeerCore requires a PEER identity")
        self.env = env
        self.identity = identity
        self.node_id = identity.rendered
        self.signing_key = signing_key
        self.registry = registry
        self.config = contract_config
        self.data_dir = Path(data_dir)
        self.peer_secret = peer_secret
        self.peers_by_org = dict(peers_by_org)
        self.ack_timeout_ms = ack_timeout_ms
        self.disseminate_retries = disseminate_retries

        self.lock = threading.RLock()
        self.chain = Blockchain()
        self.state = WorldState()
        self.offstate = offst.OffStateStore(self.data_dir / "offstate")
        self.private = PrivateStore(self.data_dir)
        self.chain_file = ChainFile(self.data_dir / "chain.bin")
        self.runtime = ContractRuntime()
        self.seen_nonces: set[tuple[str, bytes]] = set()
        self.committed: dict[str, CommittedTx] = {}
        self.subscribers: list[str] = []
        self._transfers: dict[bytes, offst.TransferReceiver] = {}
        self._transfer_replies: dict[bytes, Channel] = {}
        self._pending: dict[int, Channel] = {}
        self._endorse_seq = itertools.count(1)
        self._bootstrap(genesis_block)

    # -- bootstrap / recovery --

    def _bootstrap(self, genesis_block: Block) -> None:
        path = self.data_dir / "chain.bin"
        if path.exists() and path.stat().st_size > 0:
            blocks = read_chain_file(path)
            if not blocks or encode(blocks[0]) != encode(genesis_block):
                raise ChainMismatch("persisted chain does not start at this genesis")
            for block in blocks:
                self._absorb(block)
        else:
            self.chain_file.append(genesis_block)
            self._absorb(genesis_block)

    def _absorb(self, block: Block) -> None:
        """Apply an already-finalized block to every in-memory structure."""
        self.chain.append_block(block)
        apply_block(self.state, block)
        for index, (tx, flag) in enumerate(zip(block.transactions, block.validity)):
            self.seen_nonces.add((tx.proposal.proposer.rendered, tx.proposal.nonce))
            self.committed[tx.txid] = CommittedTx(
                height=block.header.height, index=index, validity=flag
            )

    # -- dispatcher --

    def start(self) -> None:
        self.env.spawn(self._dispatch_loop, "dispatch", service=True)

    def _dispatch_loop(self) -> None:
        while True:
            try:
                envelope = self.env.inbox.get()
            except ShuttingDown:
                return
            if isinstance(envelope, Envelope):
                self._handle(envelope)

    def _handle(self, envelope: Envelope) -> None:
        payload = envelope.payload
        if isinstance(payload, ProposeMsg):
            worker_id = next(self._endorse_seq)
            self.env.spawn(
                lambda: self._endorse_task(envelope), f"endorse-{worker_id}"
            )
        elif isinstance(payload, QueryMsg):
            worker_id = next(self._endorse_seq)
            self.env.spawn(lambda: self._query_task(envelope), f"query-{worker_id}")
        elif isinstance(payload, BlockMsg):
            self._commit_block(payload.block)
        elif isinstance(payload, SubscribeMsg):
            if payload.subscriber not in self.subscribers:
                self.subscribers.append(payload.subscriber)
        elif isinstance(payload, offst.TransferBegin):
            self._transfer_begin(envelope, payload)
        elif isinstance(payload, offst.TransferChunk):
            self._transfer_chunk(envelope, payload)
        elif isinstance(payload, offst.TransferEnd):
            self._transfer_end(envelope, payload)
        elif isinstance(payload, (offst.TransferAck, offst.TransferDone)):
            reply = self._transfer_replies.get(payload.transfer_id)
            if reply is not None:
                reply.put(payload)
        elif isinstance(payload, PdcPush):
            self._accept_private(envelope, payload.payload)
        elif isinstance(payload, PdcAck):
            pending = self._pending.pop(envelope.reply_to, None)
            if pending is not None:
                pending.put(payload)

    def _reply(self, envelope: Envelope, payload: object) -> None:
        try:
            self.env.send(envelope.src, payload, reply_to=envelope.seq)
        except Unreachable:
            pass

    # -- endorsement --

    def _state_get(self, key: StateKey) -> VersionedValue | None:
        with self.lock:
            return self.state.get(key)

    def _state_scan(self, namespace: str) -> list[tuple[StateKey, bytes]]:
        with self.lock:
            return [
                (key, vv.value)
                for key, vv in self.state.items()
                if key.namespace == namespace
            ]

    def _endorse_task(self, envelope: Envelope) -> None:
        proposal = envelope.payload.proposal
        try:
            response = self.endorse(proposal)
        except ContractError as exc:
            self._reply(envelope, EndorseErr(code=exc.code, message=str(exc)))
            return
        except ShuttingDown:
            return
        except BbsError as exc:
            self._reply(envelope, EndorseErr(code=type(exc).__name__, message=str(exc)))
            return
        self._reply(envelope, response)

    def endorse(self, proposal: Proposal) -> EndorseOk:
        """Execute the contract against committed state and sign the result."""
        if not self.registry.admit(proposal.proposer):
            raise AccessDenied(f"unknown proposer {proposal.proposer.rendered}")
        if proposal.proposer.role is not Role.CLIENT:
            raise AccessDenied("only clients may originate proposals")
        with self.lock:
            if (proposal.proposer.rendered, proposal.nonce) in self.seen_nonces:
                raise AccessDenied("proposal nonce already committed")
        ctx = ExecutionContext(
            peer_org=self.identity.org,
            proposal=proposal,
            state_get=self._state_get,
            state_scan=self._state_scan,
            private_store=self.private,
            store=self.offstate,
            registry=self.registry,
            config=self.config,
            peer_secret=self.peer_secret,
            transfer_fn=self._transfer_to,
        )
        execution = self.runtime.run(ctx, proposal.function, tuple(proposal.args))
        policy = resolve_policy(execution.rwset, self.config, self._state_get)
        check_randomized_policy(proposal.function, policy_orgs(policy.expression))
        digest = proposal.digest()
        for sw in execution.staged:
            self.private.stage(digest, sw.collection_id, sw.key, sw.value)
        endorsement = make_endorsement(self.signing_key, digest, execution.rwset)
        return EndorseOk(
            rwset=execution.rwset,
            endorsement=endorsement,
            result=execution.result,
            app_error=execution.app_error,
        )

    def _query_task(self, envelope: Envelope) -> None:
        query = envelope.payload
        try:
            result = self.query(query.function, tuple(query.args))
        except ContractError as exc:
            self._reply(envelope, QueryErr(code=exc.code, message=str(exc)))
            return
        except ShuttingDown:
            return
        except BbsError as exc:
            self._reply(envelope, QueryErr(code=type(exc).__name__, message=str(exc)))
            return
        self._reply(envelope, QueryOk(result=result))

    def query(self, function: str, args: tuple[str, ...]) -> object:
        """Run a read-only contract query against committed state."""
        synthetic = Proposal(
            proposer=self.identity,
            function=function,
            args=args,
            timestamp_ms=self.env.now_ms(),
            nonce=b"\x00" * 16,
        )
        ctx = ExecutionContext(
            peer_org=self.identity.org,
            proposal=synthetic,
            state_get=self._state_get,
            state_scan=self._state_scan,
            private_store=self.private,
            store=self.offstate,
            registry=self.registry,
            config=self.config,
            peer_secret=self.peer_secret,
            transfer_fn=None,
            read_only=True,
        )
        return self.runtime.query(ctx, function, args)

    # -- outgoing file transfer (contract side effect) --

    def _transfer_to(self, name: str, dst_org: str, buffer_size: int) -> offst.TransferJob:
        dst = self.peers_by_org.get(dst_org)
        job = offst.TransferJob(
            source=self.node_id,
            destination=dst or dst_org,
            name=name,
            total_bytes=0,
            buffer_size=buffer_size,
        )
        if dst is None:
            job.outcome = offst.Outcome.UNREACHABLE
            job.error = f"no peer known for org {dst_org}"
            return job
        transfer_id = bytes(self.env.rng.randbytes(16))
        reply = self.env.new_channel()
        self._transfer_replies[transfer_id] = reply
        try:
            return offst.run_transfer_sender(
                job,
                self.offstate,
                transfer_id,
                send=lambda msg: self.env.send(dst, msg),
                recv=lambda: reply.get(timeout_ms=self.ack_timeout_ms),
            )
        finally:
            self._transfer_replies.pop(transfer_id, None)

    # -- incoming file transfer --

    def _transfer_begin(self, envelope: Envelope, begin: offst.TransferBegin) -> None:
        try:
            receiver = offst.TransferReceiver(
                self.offstate, begin, now_ms=self.env.now_ms(), sender=envelope.src
            )
        except BbsError as exc:
            self._reply(
                envelope,
                offst.TransferDone(
                    transfer_id=begin.transfer_id, ok=False, stored_name="", error=str(exc)
                ),
            )
            return
        self._transfers[begin.transfer_id] = receiver
        self._reply(envelope, offst.TransferAck(transfer_id=begin.transfer_id, index=-1))

    def _transfer_chunk(self, envelope: Envelope, chunk: offst.TransferChunk) -> None:
        receiver = self._transfers.get(chunk.transfer_id)
        if receiver is None:
            self._reply(
                envelope,
                offst.TransferDone(
                    transfer_id=chunk.transfer_id, ok=False, stored_name="", error="unknown transfer"
                ),
            )
            return
        try:
            self._reply(envelope, receiver.on_chunk(chunk))
        except BbsError as exc:
            self._transfers.pop(chunk.transfer_id, None)
            self._reply(
                envelope,
                offst.TransferDone(
                    transfer_id=chunk.transfer_id, ok=False, stored_name="", error=str(exc)
                ),
            )

    def _transfer_end(self, envelope: Envelope, end: offst.TransferEnd) -> None:
        receiver = self._transfers.pop(end.transfer_id, None)
        if receiver is None:
            done = offst.TransferDone(
                transfer_id=end.transfer_id, ok=False, stored_name="", error="unknown transfer"
            )
        else:
            done = receiver.on_end(end)
        self._reply(envelope, done)

    # -- commit pipeline --

    def _commit_block(self, block: Block) -> None:
        if not verify_block_signature(block, self.registry):
            return  # not from the admitted orderer; ignore
        promoted: list[tuple[PrivatePayload, tuple[str, ...]]] = []
        with self.lock:
            if block.header.height != self.chain.height + 1:
                return  # duplicate or out-of-order broadcast
            flags = validate_block(
                block, self.state.get, self.registry, self.config, self.seen_nonces
            )
            final = finalize_block(block, flags)
            self.chain_file.append(final)
            self.chain.append_block(final)
            apply_block(self.state, final)
            entries = []
            height = final.header.height
            for index, (tx, flag) in enumerate(zip(final.transactions, final.validity)):
                digest = tx.proposal.digest()
                self.seen_nonces.add((tx.proposal.proposer.rendered, tx.proposal.nonce))
                self.committed[tx.txid] = CommittedTx(
                    height=height, index=index, validity=flag
                )
                entries.append(CommitEntry(txid=tx.txid, validity=flag))
                if flag is TxValidity.VALID:
                    for sw in self.private.commit_stage(digest, (height, index)):
                        members = self._collection_members(sw.collection_id)
                        others = tuple(m for m in members if m != self.identity.org)
                        if others:
                            promoted.append(
                                (
                                    PrivatePayload(
                                        collection_id=sw.collection_id,
                                        key=sw.key,
                                        value=sw.value,
                                        tx_id=tx.txid,
                                    ),
                                    others,
                                )
                            )
                else:
                    self.private.discard_stage(digest)
        note = CommitNote(height=height, entries=tuple(entries))
        for subscriber in list(self.subscribers):
            try:
                self.env.send(subscriber, note)
            except Unreachable:
                pass
        for payload, member_orgs in promoted:
            for org in member_orgs:
                dst = self.peers_by_org.get(org)
                if dst is not None and dst != self.node_id:
                    self.env.spawn(
                        lambda p=payload, d=dst: self._disseminate(p, d),
                        f"pdc-push-{payload.collection_id[:8]}-{org}",
                    )

    def _collection_members(self, collection_id: str) -> tuple[str, ...]:
        vv = self.state.get(collection_state_key(collection_id))
        if vv is None:
            return ()
        cfg = decode(vv.value)
        return tuple(cfg.members)

    def _disseminate(self, payload: PrivatePayload, dst: str) -> None:
        """Push a committed private value to another member, bounded retries."""
        delay_ms = 200
        for _ in range(self.disseminate_retries):
            reply = self.env.new_channel()
            seq: int | None = None
            try:
                seq = self.env.send(dst, PdcPush(payload=payload))
                self._pending[seq] = reply
                ack = reply.get(timeout_ms=2_000)
                if isinstance(ack, PdcAck) and ack.ok:
                    return
            except (Unreachable, RequestTimeout):
                pass
            finally:
                if seq is not None:
                    self._pending.pop(seq, None)
            self.env.sleep_ms(delay_ms)
            delay_ms *= 2

    def _accept_private(self, envelope: Envelope, payload: PrivatePayload) -> None:
        with self.lock:
            committed = self.state.get(
                private_state_key(payload.collection_id, payload.key)
            )
            if committed is None or committed.value != hash_bytes(payload.value):
                self._reply(envelope, PdcAck(ok=False))
                return
            self.private.accept(
                payload.collection_id, payload.key, payload.value, committed.version
            )
        self._reply(envelope, PdcAck(ok=True))

    # -- observation helpers (tests, audit, CLI) --

    def world_digest(self) -> bytes:
        with self.lock:
            return self.state.digest()

    def blocks(self) -> list[Block]:
        with self.lock:
            return list(self.chain.blocks)

    def memory_image(self) -> bytes:
        """Canonical serialization of everything this peer holds in memory."""
        with self.lock:
            return encode(
                (
                    list(self.chain.blocks),
                    [
                        (key.rendered, vv.value, list(vv.version))
                        for key, vv in self.state.items()
                    ],
                    self.private.snapshot_bytes(),
                )
            )

    def close(self) -> None:
        self.chain_file.close()
        self.private.close()


# ---------------------------------------------------------------------------
# Orderer
# ---------------------------------------------------------------------------


class OrdererCore:
    """Crash-stop ordering service: FIFO batching, no execution, no validation."""

    def __init__(
        self,
        env: Env,
        identity: Identity,
        signing_key: SigningKey,
        registry: ConsortiumRegistry,
        genesis_block: Block,
        peer_ids: list[str],
        batch_size: int = 10,
        batch_timeout_ms: int = 200,
    ) -> None:
        if identity.role is not Role.ORDERER:
            raise BbsError("OrdererCore requires an ORDERER identity")
        self.env = env
        self.identity = identity
        self.node_id = identity.rendered
        self.registry = registry
        self.peer_ids = list(peer_ids)
        self.batcher = OrdererBatcher(
            signing_key,
            genesis_block.header,
            batch_size=batch_size,
            timeout_ms=batch_timeout_ms,
        )

    def start(self) -> None:
        self.env.spawn(self._loop, "order", service=True)

    def _loop(self) -> None:
        while True:
            deadline = self.batcher.deadline_ms()
            timeout = (
                None if deadline is None else max(0, deadline - self.env.now_ms())
            )
            try:
                envelope = self.env.inbox.get(timeout_ms=timeout)
            except ShuttingDown:
                return
            except RequestTimeout:
                self._emit(self.batcher.poll(self.env.now_ms()))
                continue
            payload = envelope.payload if isinstance(envelope, Envelope) else None
            if isinstance(payload, SubmitMsg):
                self._emit(self.batcher.submit(payload.tx, self.env.now_ms()))
            # A timer may have lapsed while we were reading submissions.
            self._emit(self.batcher.poll(self.env.now_ms()))

    def _emit(self, block: Block | None) -> None:
        if block is None:
            return
        for peer in self.peer_ids:
            try:
                self.env.send(peer, BlockMsg(block=block))
            except Unreachable:
                continue


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------


@dataclass
class InvokeOutcome:
    """Everything a client learns about one transaction."""

    txid: str
    result: object
    app_error: str
    validity: TxValidity
    height: int
    endorse_ms: int
    commit_ms: int

    @property
    def total_ms(self) -> int:
        return self.endorse_ms + self.commit_ms

    @property
    def valid(self) -> bool:
        return self.validity is TxValidity.VALID


class ClientCore:
    """Application-side driver of the transaction pipeline."""

    def __init__(
        self,
        env: Env,
        identity: Identity,
        registry: ConsortiumRegistry,
        peers_by_org: dict[str, str],
        orderer_id: str,
        default_timeout_ms: int = 120_000,
    ) -> None:
        if identity.role is not Role.CLIENT:
            raise BbsError("ClientCore requires a CLIENT identity")
        self.env = env
        self.identity = identity
        self.node_id = identity.rendered
        self.registry = registry
        self.peers_by_org = dict(peers_by_org)
        self.orderer_id = orderer_id
        self.default_timeout_ms = default_timeout_ms
        self.lock = threading.RLock()
        self.commit_log: list[CommitNote] = []
        self._pending: dict[int, Channel] = {}
        self._commit_waiters: dict[str, Channel] = {}

    def start(self) -> None:
        self.env.spawn(self._dispatch_loop, "dispatch", service=True)

    def subscribe(self, org: str | None = None) -> None:
        """Ask a peer (own org's by default) to stream commit notifications."""
        peer = self._peer_for(org or self.identity.org)
        self.env.send(peer, SubscribeMsg(subscriber=self.node_id))

    def _peer_for(self, org: str) -> str:
        peer = self.peers_by_org.get(org)
        if peer is None:
            raise InvokeFailed("UnknownOrg", f"no peer for org {org}")
        return peer

    def _dispatch_loop(self) -> None:
        while True:
            try:
                envelope = self.env.inbox.get()
            except ShuttingDown:
                return
            if not isinstance(envelope, Envelope):
                continue
            payload = envelope.payload
            if isinstance(payload, CommitNote):
                with self.lock:
                    self.commit_log.append(payload)
                    for entry in payload.entries:
                        waiter = self._commit_waiters.pop(entry.txid, None)
                        if waiter is not None:
                            waiter.put((payload.height, entry.validity))
            elif envelope.reply_to:
                with self.lock:
                    waiter = self._pending.pop(envelope.reply_to, None)
                if waiter is not None:
                    waiter.put(payload)

    # -- endorsement collection --

    def endorse(
        self,
        function: str,
        args: tuple[str, ...],
        endorser_orgs: list[str],
        timeout_ms: int | None = None,
    ) -> tuple[Proposal, list[EndorseOk]]:
        """Propose to each endorser org's peer and collect signed responses."""
        timeout = timeout_ms if timeout_ms is not None else self.default_timeout_ms
        proposal = Proposal(
            proposer=self.identity,
            function=function,
            args=tuple(args),
            timestamp_ms=self.env.now_ms(),
            nonce=bytes(self.env.rng.randbytes(16)),
        )
        reply = self.env.new_channel()
        seqs = []
        for org in endorser_orgs:
            seq = self.env.send(self._peer_for(org), ProposeMsg(proposal=proposal))
            seqs.append(seq)
            with self.lock:
                self._pending[seq] = reply
        responses: list[EndorseOk] = []
        try:
            for _ in endorser_orgs:
                answer = reply.get(timeout_ms=timeout)
                if isinstance(answer, EndorseErr):
                    raise InvokeFailed(answer.code, answer.message)
                if not isinstance(answer, EndorseOk):
                    raise InvokeFailed("BadResponse", f"unexpected {type(answer).__name__}")
                responses.append(answer)
        finally:
            with self.lock:
                for seq in seqs:
                    self._pending.pop(seq, None)
        return proposal, responses

    def assemble_tx(self, proposal: Proposal, responses: list[EndorseOk]) -> Transaction:
        return assemble(proposal, [(r.rwset, r.endorsement) for r in responses])

    # -- ordering and commit --

    def submit(self, tx: Transaction) -> Channel:
        """Send for ordering; returns the channel the commit note will land on."""
        waiter = self.env.new_channel()
        with self.lock:
            self._commit_waiters[tx.txid] = waiter
        self.env.send(self.orderer_id, SubmitMsg(tx=tx))
        return waiter

    def wait_commit(self, waiter: Channel, timeout_ms: int | None = None) -> tuple[int, TxValidity]:
        timeout = timeout_ms if timeout_ms is not None else self.default_timeout_ms
        height, validity = waiter.get(timeout_ms=timeout)
        return height, validity

    def invoke(
        self,
        function: str,
        args: tuple[str, ...],
        endorser_orgs: list[str],
        timeout_ms: int | None = None,
    ) -> InvokeOutcome:
        """Full pipeline: endorse, assemble, order, wait for the validity flag."""
        t0 = self.env.now_ms()
        proposal, responses = self.endorse(function, args, endorser_orgs, timeout_ms)
        tx = self.assemble_tx(proposal, responses)
        t1 = self.env.now_ms()
        waiter = self.submit(tx)
        height, validity = self.wait_commit(waiter, timeout_ms)
        t2 = self.env.now_ms()
        first = responses[0]
        return InvokeOutcome(
            txid=tx.txid,
            result=first.result,
            app_error=first.app_error,
            validity=validity,
            height=height,
            endorse_ms=t1 - t0,
            commit_ms=t2 - t1,
        )

    # -- queries --

    def query(
        self,
        function: str,
        args: tuple[str, ...],
        org: str | None = None,
        timeout_ms: int | None = None,
    ) -> object:
        timeout = timeout_ms if timeout_ms is not None else self.default_timeout_ms
        peer = self._peer_for(org or self.identity.org)
        reply = self.env.new_channel()
        seq = self.env.send(peer, QueryMsg(function=function, args=tuple(args)))
        with self.lock:
            self._pending[seq] = reply
        try:
            answer = reply.get(timeout_ms=timeout)
        finally:
            with self.lock:
                self._pending.pop(seq, None)
        if isinstance(answer, QueryErr):
            raise QueryFailed(answer.code, answer.message)
        if not isinstance(answer, QueryOk):
            raise QueryFailed("BadResponse", f"unexpected {type(answer).__name__}")
        return answer.result
