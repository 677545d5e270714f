"""Per-node off-state storage and streaming file cryptography.

Off-state is the ledger-external big-data space of one node: a flat
directory of entries, each with a canonical-encoded metadata sidecar. An
entry becomes observable only after its final byte and metadata are both in
place (temp name + rename), and existing entries are never silently
overwritten; colliding puts get a versioned name.

Encryption is chunked authenticated AES-256-GCM: the on-disk cipher file
carries a header (magic, chunk size, 12-byte base nonce) followed by
length-prefixed ciphertext frames. Chunk nonces are the 7-byte base prefix
plus a counter and a final-chunk flag, so truncation and reordering fail
authentication. Memory stays O(chunk) end to end.
"""

from __future__ import annotations

import enum
import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .encoding import canonical, decode, encode
from .errors import AuthFailed, IntegrityMismatch, NotFound, OffStateError

DEFAULT_CHUNK = 1 << 20  # 1 MB, the paper-chosen buffer size
_CIPHER_MAGIC = b"BBSC\x01"
_FLAG_MID = 0
_FLAG_FINAL = 1
_FILE_SIG_CONTEXT = b"bbs/file-signature/"


@canonical
@dataclass(frozen=True)
class OffStateMeta:
    length: int
    sha256: bytes
    received_from: str  # "" when locally produced
    stored_at_ms: int


class OffStateStore:
    """Flat entry store rooted at ``<node-dir>/offstate``."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._tmp = self.root / ".tmp"
        self._tmp.mkdir(exist_ok=True)

    # --- naming -----------------------------------------------------------

    @staticmethod
    def _check_name(name: str) -> None:
        if not name or name.startswith(".") or "/" in name or "\\" in name:
            raise OffStateError(f"bad entry name: {name!r}")
        if name.endswith(".meta"):
            raise OffStateError(f"reserved suffix in name: {name!r}")

    def _path(self, name: str) -> Path:
        self._check_name(name)
        return self.root / name

    def _meta_path(self, name: str) -> Path:
        return self.root / (name + ".meta")

    def _versioned_name(self, name: str) -> str:
        n = 1
        while self.exists(f"{name}~{n}"):
            n += 1
        return f"{name}~{n}"

    # --- observation ------------------------------------------------------

    def exists(self, name: str) -> bool:
        self._check_name(name)
        return self._path(name).exists() and self._meta_path(name).exists()

    def meta(self, name: str) -> OffStateMeta:
        if not self.exists(name):
            raise NotFound(name)
        value = decode(self._meta_path(name).read_bytes())
        if not isinstance(value, OffStateMeta):
            raise OffStateError(f"corrupt metadata sidecar for {name}")
        return value

    def path(self, name: str) -> Path:
        if not self.exists(name):
            raise NotFound(name)
        return self._path(name)

    def size(self, name: str) -> int:
        return self.path(name).stat().st_size

    def open_read(self, name: str) -> BinaryIO:
        return open(self.path(name), "rb")

    def read_bytes(self, name: str) -> bytes:
        return self.path(name).read_bytes()

    def list_names(self) -> list[str]:
        names = []
        for p in sorted(self.root.iterdir()):
            if p.is_file() and not p.name.endswith(".meta"):
                if self.exists(p.name):
                    names.append(p.name)
        return names

    def hash_of(self, name: str) -> bytes:
        """Streamed SHA-256 over the entry's bytes."""
        h = hashlib.sha256()
        with self.open_read(name) as fh:
            while True:
                chunk = fh.read(DEFAULT_CHUNK)
                if not chunk:
                    break
                h.update(chunk)
        return h.digest()

    def find_by_hash(self, digest: bytes) -> str | None:
        """Locate an entry by its metadata content hash."""
        for name in self.list_names():
            if self.meta(name).sha256 == digest:
                return name
        return None

    # --- mutation ---------------------------------------------------------

    def writer(self, name: str) -> "EntryWriter":
        self._check_name(name)
        return EntryWriter(self, name)

    def put_bytes(
        self, name: str, data: bytes, *, received_from: str = "", stored_at_ms: int = 0
    ) -> str:
        w = self.writer(name)
        w.write(data)
        return w.commit(received_from=received_from, stored_at_ms=stored_at_ms)

    def put_stream(
        self,
        name: str,
        chunks: Iterator[bytes],
        *,
        received_from: str = "",
        stored_at_ms: int = 0,
    ) -> str:
        w = self.writer(name)
        for chunk in chunks:
            w.write(chunk)
        return w.commit(received_from=received_from, stored_at_ms=stored_at_ms)

    def delete(self, name: str) -> None:
        if not self.exists(name):
            raise NotFound(name)
        self._path(name).unlink()
        self._meta_path(name).unlink()

    def _finalize(
        self, tmp_path: Path, name: str, meta: OffStateMeta
    ) -> str:
        # Same name + same content: idempotent no-op. Different content:
        # versioned name, never an overwrite.
        final = name
        if self.exists(name):
            if self.meta(name).sha256 == meta.sha256:
                tmp_path.unlink()
                return name
            final = self._versioned_name(name)
        meta_tmp = self._tmp / (final + ".meta.part")
        meta_tmp.write_bytes(encode(meta))
        os.replace(tmp_path, self._path(final))
        os.replace(meta_tmp, self._meta_path(final))
        return final


class EntryWriter:
    """Streaming writer with temp-then-rename visibility."""

    def __init__(self, store: OffStateStore, name: str) -> None:
        self._store = store
        self.name = name
        self._tmp_path = store._tmp / (name + f".{os.getpid()}.{id(self):x}.part")
        self._fh: BinaryIO | None = open(self._tmp_path, "wb")
        self._hasher = hashlib.sha256()
        self.written = 0

    def write(self, data: bytes) -> None:
        if self._fh is None:
            raise OffStateError("writer already closed")
        self._fh.write(data)
        self._hasher.update(data)
        self.written += len(data)

    def digest(self) -> bytes:
        return self._hasher.digest()

    def abort(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._tmp_path.unlink(missing_ok=True)

    def commit(self, *, received_from: str = "", stored_at_ms: int = 0) -> str:
        if self._fh is None:
            raise OffStateError("writer already closed")
        self._fh.close()
        self._fh = None
        meta = OffStateMeta(
            length=self.written,
            sha256=self._hasher.digest(),
            received_from=received_from,
            stored_at_ms=stored_at_ms,
        )
        return self._store._finalize(self._tmp_path, self.name, meta)


# --- streaming authenticated encryption ------------------------------------------


def _chunk_nonce(base: bytes, counter: int, final: bool) -> bytes:
    return base[:7] + struct.pack(">IB", counter, _FLAG_FINAL if final else _FLAG_MID)


def encrypt_stream(
    store: OffStateStore,
    name: str,
    key: bytes,
    *,
    cipher_name: str | None = None,
    chunk_size: int = DEFAULT_CHUNK,
    base_nonce: bytes | None = None,
    stored_at_ms: int = 0,
) -> str:
    """Encrypt an entry into an authenticated cipher entry; returns its name."""
    if len(key) != 32:
        raise OffStateError("key must be 32 bytes")
    if chunk_size <= 0:
        raise OffStateError("chunk size must be positive")
    src = store.path(name)  # NotFound if absent
    base = base_nonce if base_nonce is not None else os.urandom(12)
    if len(base) != 12:
        raise OffStateError("base nonce must be 12 bytes")
    header = _CIPHER_MAGIC + struct.pack(">I", chunk_size) + base
    gcm = AESGCM(key)
    out = store.writer(cipher_name or (name + ".fz"))
    try:
        out.write(header)
        with open(src, "rb") as fh:
            counter = 0
            chunk = fh.read(chunk_size)
            while True:
                nxt = fh.read(chunk_size)
                final = not nxt
                ct = gcm.encrypt(_chunk_nonce(base, counter, final), chunk, header)
                out.write(struct.pack(">I", len(ct)) + ct)
                if final:
                    break
                chunk = nxt
                counter += 1
        return out.commit(stored_at_ms=stored_at_ms)
    except BaseException:
        out.abort()
        raise


def decrypt_stream(
    store: OffStateStore,
    cipher_name: str,
    key: bytes,
    *,
    plain_name: str | None = None,
    stored_at_ms: int = 0,
) -> str:
    """Decrypt a cipher entry; AuthFailed on any tampering or wrong key."""
    if len(key) != 32:
        raise OffStateError("key must be 32 bytes")
    path = store.path(cipher_name)
    out = store.writer(plain_name or (cipher_name + ".plain"))
    try:
        with open(path, "rb") as fh:
            header = fh.read(len(_CIPHER_MAGIC) + 4 + 12)
            if len(header) != len(_CIPHER_MAGIC) + 16 or not header.startswith(_CIPHER_MAGIC):
                raise AuthFailed("bad cipher header")
            (chunk_size,) = struct.unpack(">I", header[len(_CIPHER_MAGIC) : len(_CIPHER_MAGIC) + 4])
            if chunk_size <= 0:
                raise AuthFailed("bad chunk size")
            base = header[-12:]
            gcm = AESGCM(key)
            counter = 0
            saw_final = False
            while True:
                prefix = fh.read(4)
                if not prefix:
                    break
                if len(prefix) != 4 or saw_final:
                    raise AuthFailed("trailing or truncated frame")
                (ct_len,) = struct.unpack(">I", prefix)
                if ct_len < 16 or ct_len > chunk_size + 16:
                    raise AuthFailed("frame length out of range")
                ct = fh.read(ct_len)
                if len(ct) != ct_len:
                    raise AuthFailed("truncated ciphertext frame")
                final = ct_len < chunk_size + 16  # shorter frame can only be last
                try:
                    pt = gcm.decrypt(_chunk_nonce(base, counter, final), ct, header)
                except InvalidTag:
                    # A full-size final chunk carries the final flag instead.
                    if not final:
                        try:
                            pt = gcm.decrypt(_chunk_nonce(base, counter, True), ct, header)
                            final = True
                        except InvalidTag as exc:
                            raise AuthFailed("authentication failed") from exc
                    else:
                        raise AuthFailed("authentication failed") from None
                out.write(pt)
                counter += 1
                if final:
                    saw_final = True
            if not saw_final:
                raise AuthFailed("missing final chunk")
        return out.commit(stored_at_ms=stored_at_ms)
    except BaseException:
        out.abort()
        raise


# --- streaming signatures ----------------------------------------------------------


def sign_file(store: OffStateStore, name: str, signing_key: Ed25519PrivateKey) -> bytes:
    """Ed25519 signature over the streamed digest of the entry's bytes."""
    digest = store.hash_of(name)
    return signing_key.sign(_FILE_SIG_CONTEXT + digest)


def verify_file(store: OffStateStore, name: str, public_key: bytes, signature: bytes) -> bool:
    try:
        return verify_file_digest(store.hash_of(name), public_key, signature)
    except OffStateError:
        return False


def verify_file_digest(digest: bytes, public_key: bytes, signature: bytes) -> bool:
    """Check a detached file signature given only the digest it covers."""
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(
            signature, _FILE_SIG_CONTEXT + digest
        )
        return True
    except Exception:
        return False


# --- chunked transfer protocol -------------------------------------------------------
# Wire sequence per job: TransferBegin{name, total-length, h_z}, then
# length-delimited TransferChunk frames of buffer-size bytes (receiver acks
# each), then a terminal TransferEnd carrying the digest again. The receiver
# writes to a temp entry and renames only after the digest checks out.


@canonical
@dataclass(frozen=True)
class TransferBegin:
    transfer_id: bytes
    name: str
    total_len: int
    digest: bytes
    buffer_size: int


@canonical
@dataclass(frozen=True)
class TransferChunk:
    transfer_id: bytes
    index: int
    data: bytes


@canonical
@dataclass(frozen=True)
class TransferEnd:
    transfer_id: bytes
    digest: bytes


@canonical
@dataclass(frozen=True)
class TransferAck:
    transfer_id: bytes
    index: int  # -1 acknowledges the Begin frame


@canonical
@dataclass(frozen=True)
class TransferDone:
    transfer_id: bytes
    ok: bool
    stored_name: str
    error: str


class Outcome(enum.Enum):
    SUCCESS = "Success"
    UNREACHABLE = "Unreachable"
    INTERRUPTED = "Interrupted"
    INTEGRITY_MISMATCH = "IntegrityMismatch"


@dataclass
class TransferJob:
    source: str
    destination: str
    name: str
    total_bytes: int
    buffer_size: int = DEFAULT_CHUNK
    progress: int = 0
    outcome: Outcome | None = None
    stored_name: str = ""
    error: str = ""


class TransferReceiver:
    """Destination-side state machine, one instance per incoming job."""

    def __init__(self, store: OffStateStore, begin: TransferBegin, *, now_ms: int, sender: str) -> None:
        if begin.total_len < 0 or begin.buffer_size <= 0:
            raise IntegrityMismatch("malformed transfer header")
        self.store = store
        self.begin = begin
        self.sender = sender
        self.now_ms = now_ms
        self.next_index = 0
        self.writer = store.writer(begin.name)
        self.done = False

    def on_chunk(self, chunk: TransferChunk) -> TransferAck:
        if self.done:
            raise IntegrityMismatch("chunk after completion")
        if chunk.index != self.next_index:
            self.abort()
            raise IntegrityMismatch(f"out-of-order chunk {chunk.index}")
        self.writer.write(chunk.data)
        self.next_index += 1
        return TransferAck(transfer_id=chunk.transfer_id, index=chunk.index)

    def on_end(self, end: TransferEnd) -> TransferDone:
        if self.done:
            raise IntegrityMismatch("duplicate end frame")
        self.done = True
        digest = self.writer.digest()
        length = self.writer.written
        if digest != self.begin.digest or digest != end.digest or length != self.begin.total_len:
            self.writer.abort()
            return TransferDone(
                transfer_id=end.transfer_id,
                ok=False,
                stored_name="",
                error="integrity mismatch",
            )
        stored = self.writer.commit(received_from=self.sender, stored_at_ms=self.now_ms)
        return TransferDone(transfer_id=end.transfer_id, ok=True, stored_name=stored, error="")

    def abort(self) -> None:
        self.done = True
        self.writer.abort()


def iter_file_chunks(store: OffStateStore, name: str, buffer_size: int) -> Iterator[bytes]:
    with store.open_read(name) as fh:
        while True:
            chunk = fh.read(buffer_size)
            if not chunk:
                break
            yield chunk


def run_transfer_sender(
    job: TransferJob,
    store: OffStateStore,
    transfer_id: bytes,
    send: Callable[[object], None],
    recv: Callable[[], object],
) -> TransferJob:
    """Drive the sender side of one job over injected send/recv callables.

    ``recv`` must return the next TransferAck/TransferDone for this job or
    raise (timeout, unreachable); any raise maps to an Interrupted outcome
    unless the send itself failed, which maps to Unreachable.
    """
    digest = store.hash_of(job.name)
    job.total_bytes = store.size(job.name)
    try:
        send(
            TransferBegin(
                transfer_id=transfer_id,
                name=job.name,
                total_len=job.total_bytes,
                digest=digest,
                buffer_size=job.buffer_size,
            )
        )
    except Exception as exc:
        job.outcome = Outcome.UNREACHABLE
        job.error = str(exc)
        return job
    try:
        ack = recv()
        if not isinstance(ack, TransferAck) or ack.index != -1:
            raise IntegrityMismatch("expected begin ack")
        for index, data in enumerate(iter_file_chunks(store, job.name, job.buffer_size)):
            send(TransferChunk(transfer_id=transfer_id, index=index, data=data))
            ack = recv()
            if not isinstance(ack, TransferAck) or ack.index != index:
                raise IntegrityMismatch(f"bad ack for chunk {index}")
            job.progress += len(data)
        send(TransferEnd(transfer_id=transfer_id, digest=digest))
        done = recv()
        if not isinstance(done, TransferDone):
            raise IntegrityMismatch("expected completion frame")
        if done.ok:
            job.outcome = Outcome.SUCCESS
            job.stored_name = done.stored_name
        else:
            job.outcome = Outcome.INTEGRITY_MISMATCH
            job.error = done.error
    except IntegrityMismatch as exc:
        job.outcome = Outcome.INTEGRITY_MISMATCH
        job.error = str(exc)
    except Exception as exc:
        job.outcome = Outcome.INTERRUPTED
        job.error = str(exc)
    return job
