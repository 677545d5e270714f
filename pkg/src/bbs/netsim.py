"""Deterministic message transport: simulated links and real sockets.

Node logic in this package is plain blocking Python: loops that read an
inbox channel and send messages. This module gives that code two
interchangeable homes.

The simulation backend runs each node loop on a cooperative lockstep
thread. Exactly one thread is runnable at a time; everything else is
parked on an event. Blocking operations (channel get, sleep) hand control
back to a scheduler that owns a virtual microsecond clock and an event
heap, so a full multi-node run is single-stepped, and with a fixed seed
the delivery trace is reproducible byte for byte. Links model bandwidth
as serial occupancy (a message holds the directed link for size/rate) plus
fixed latency, with optional drops and partitions.

The socket backend keeps the same Envelope frames over TCP with 4-byte
big-endian length prefixes, one listener per node, cached outbound
connections, and wall-clock time.
"""

from __future__ import annotations

import heapq
import itertools
import random
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

from .encoding import canonical, decode, encode, frame
from .errors import (
    BbsError,
    ConfigError,
    ConnectFailed,
    RequestTimeout,
    ShuttingDown,
    Unreachable,
)


class DeadlockDetected(BbsError):
    """No task is runnable, no event is pending, yet work tasks are blocked."""


@canonical
@dataclass(frozen=True)
class Envelope:
    """One transported message. ``reply_to`` echoes the request's seq (0 = none)."""

    src: str
    dst: str
    seq: int
    reply_to: int
    payload: object


@dataclass(frozen=True)
class LinkParams:
    bandwidth_bps: int  # bytes per second
    latency_us: int
    drop_rate: float = 0.0

    def transmit_us(self, size: int) -> int:
        return (size * 1_000_000 + self.bandwidth_bps - 1) // self.bandwidth_bps


DEFAULT_LINK = LinkParams(bandwidth_bps=400 * 1_000_000, latency_us=1000)


# ---------------------------------------------------------------------------
# Channel abstraction
# ---------------------------------------------------------------------------


class Channel:
    """Blocking FIFO handed to node code; backend-specific subclasses."""

    def put(self, item: object) -> None:
        raise NotImplementedError

    def get(self, timeout_ms: int | None = None) -> object:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class RealChannel(Channel):
    def __init__(self) -> None:
        self._items: deque[object] = deque()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, item: object) -> None:
        with self._cond:
            if self._closed:
                return
            self._items.append(item)
            self._cond.notify()

    def get(self, timeout_ms: int | None = None) -> object:
        deadline = None if timeout_ms is None else time.monotonic() + timeout_ms / 1000.0
        with self._cond:
            while True:
                if self._items:
                    return self._items.popleft()
                if self._closed:
                    raise ShuttingDown()
                if deadline is None:
                    self._cond.wait()
                else:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        raise RequestTimeout("channel get timed out")
                    self._cond.wait(remaining)

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()


# ---------------------------------------------------------------------------
# Simulation kernel
# ---------------------------------------------------------------------------


class _Timer:
    __slots__ = ("at_us", "seq", "fn", "cancelled")

    def __init__(self, at_us: int, seq: int, fn: Callable[[], None]) -> None:
        self.at_us = at_us
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def __lt__(self, other: "_Timer") -> bool:
        return (self.at_us, self.seq) < (other.at_us, other.seq)


class _Task:
    def __init__(self, kernel: "SimKernel", name: str, fn: Callable[[], None], service: bool) -> None:
        self.kernel = kernel
        self.name = name
        self.fn = fn
        self.service = service
        self.go = threading.Event()
        self.done = False
        self.cancelled = False
        self.blocked = False
        self.thread = threading.Thread(target=self._main, name=f"sim:{name}", daemon=True)

    def _main(self) -> None:
        self.go.wait()
        self.go.clear()
        try:
            if not self.cancelled:
                self.fn()
        except ShuttingDown:
            pass
        except BaseException as exc:  # surfaced by the kernel run loop
            self.kernel._crashes.append((self.name, exc))
        finally:
            self.done = True
            self.kernel._yielded.set()


class SimKernel:
    """Lockstep scheduler: cooperative threads over a virtual clock."""

    def __init__(self, seed: int | str = 0) -> None:
        self.now_us = 0
        self._seed = str(seed)
        self._timers: list[_Timer] = []
        self._timer_seq = itertools.count()
        self._ready: deque[_Task] = deque()
        self._tasks: list[_Task] = []
        self._by_thread: dict[threading.Thread, _Task] = {}
        self._yielded = threading.Event()
        self._channels: list[SimChannel] = []
        self._crashes: list[tuple[str, BaseException]] = []
        self._send_seq = itertools.count(1)
        self.trace: list[str] = []
        self.shutting_down = False

    # -- task management --

    def spawn(self, fn: Callable[[], None], name: str, *, service: bool = False) -> None:
        if self.shutting_down:
            raise ShuttingDown()
        task = _Task(self, name, fn, service)
        self._tasks.append(task)
        self._by_thread[task.thread] = task
        task.thread.start()
        self._ready.append(task)

    def current_task(self) -> _Task:
        task = self._by_thread.get(threading.current_thread())
        if task is None:
            raise BbsError("blocking simulation call outside a simulated task")
        return task

    def _park_current(self) -> None:
        """Yield control to the scheduler until this task is re-readied."""
        task = self.current_task()
        task.blocked = True
        self._yielded.set()
        task.go.wait()
        task.go.clear()
        if task.cancelled:
            raise ShuttingDown()

    def _ready_task(self, task: _Task) -> None:
        if not task.done:
            task.blocked = False
            self._ready.append(task)

    def _step(self, task: _Task) -> None:
        task.go.set()
        self._yielded.wait()
        self._yielded.clear()

    # -- time --

    def schedule(self, delay_us: int, fn: Callable[[], None]) -> _Timer:
        timer = _Timer(self.now_us + max(0, delay_us), next(self._timer_seq), fn)
        heapq.heappush(self._timers, timer)
        return timer

    def sleep_us(self, us: int) -> None:
        task = self.current_task()
        self.schedule(us, lambda: self._ready_task(task))
        self._park_current()

    def _next_live_timer(self) -> _Timer | None:
        while self._timers:
            if self._timers[0].cancelled:
                heapq.heappop(self._timers)
                continue
            return self._timers[0]
        return None

    # -- run loops --

    def _drain_ready(self) -> None:
        while self._ready:
            task = self._ready.popleft()
            if task.done:
                continue
            self._step(task)
            if self._crashes:
                name, exc = self._crashes.pop()
                raise BbsError(f"simulated task {name!r} crashed") from exc

    def _check_deadlock(self) -> None:
        stuck = [
            t.name
            for t in self._tasks
            if not t.done and not t.service and t.blocked
        ]
        if stuck:
            raise DeadlockDetected(
                "no runnable task and no pending event, but work is blocked: "
                + ", ".join(sorted(stuck))
            )

    def run_until_quiescent(self, max_ms: int | None = None) -> list[str]:
        """Advance until nothing is runnable or scheduled; return new trace lines."""
        mark = len(self.trace)
        limit_us = None if max_ms is None else self.now_us + max_ms * 1000
        while True:
            self._drain_ready()
            timer = self._next_live_timer()
            if timer is None:
                # True quiescence: anything still blocked can never wake.
                self._check_deadlock()
                break
            if limit_us is not None and timer.at_us > limit_us:
                break
            heapq.heappop(self._timers)
            self.now_us = max(self.now_us, timer.at_us)
            timer.fn()
        return self.trace[mark:]

    def run_for(self, duration_ms: int) -> list[str]:
        """Advance exactly ``duration_ms`` of virtual time, then stop."""
        mark = len(self.trace)
        target = self.now_us + duration_ms * 1000
        while True:
            self._drain_ready()
            timer = self._next_live_timer()
            if timer is None:
                self._check_deadlock()
                break
            if timer.at_us > target:
                break
            heapq.heappop(self._timers)
            self.now_us = max(self.now_us, timer.at_us)
            timer.fn()
        self.now_us = target
        return self.trace[mark:]

    def shutdown(self) -> None:
        self.shutting_down = True
        for channel in self._channels:
            channel.close()
        for task in self._tasks:
            if not task.done:
                task.cancelled = True
                self._ready.append(task)
        # Let cancelled tasks unwind; they raise ShuttingDown at their next park.
        while self._ready:
            task = self._ready.popleft()
            if not task.done:
                self._step(task)
        for task in self._tasks:
            task.go.set()
            task.thread.join(timeout=2.0)

    # -- randomness --

    def rng_for(self, label: str) -> random.Random:
        return random.Random(f"bbs-sim/{self._seed}/{label}".encode())

    def next_send_seq(self) -> int:
        return next(self._send_seq)


class SimChannel(Channel):
    def __init__(self, kernel: SimKernel) -> None:
        self.kernel = kernel
        self._items: deque[object] = deque()
        self._waiters: deque[dict] = deque()
        self._closed = False
        kernel._channels.append(self)

    def put(self, item: object) -> None:
        if self._closed:
            return
        if self._waiters:
            waiter = self._waiters.popleft()
            waiter["state"] = "ok"
            waiter["item"] = item
            if waiter["timer"] is not None:
                waiter["timer"].cancelled = True
            self.kernel._ready_task(waiter["task"])
        else:
            self._items.append(item)

    def get(self, timeout_ms: int | None = None) -> object:
        if self._items:
            return self._items.popleft()
        if self._closed:
            raise ShuttingDown()
        task = self.kernel.current_task()
        waiter: dict = {"task": task, "state": "pending", "item": None, "timer": None}
        if timeout_ms is not None:
            waiter["timer"] = self.kernel.schedule(
                timeout_ms * 1000, lambda: self._timeout(waiter)
            )
        self._waiters.append(waiter)
        self.kernel._park_current()
        if waiter["state"] == "ok":
            return waiter["item"]
        if waiter["state"] == "timeout":
            raise RequestTimeout("channel get timed out")
        raise ShuttingDown()

    def _timeout(self, waiter: dict) -> None:
        if waiter["state"] != "pending":
            return
        waiter["state"] = "timeout"
        try:
            self._waiters.remove(waiter)
        except ValueError:
            pass
        self.kernel._ready_task(waiter["task"])

    def close(self) -> None:
        self._closed = True
        while self._waiters:
            waiter = self._waiters.popleft()
            if waiter["state"] == "pending":
                waiter["state"] = "closed"
                if waiter["timer"] is not None:
                    waiter["timer"].cancelled = True
                self.kernel._ready_task(waiter["task"])


# ---------------------------------------------------------------------------
# Simulated transport
# ---------------------------------------------------------------------------


class SimTransport:
    """Directed links with serial bandwidth occupancy, latency and faults."""

    def __init__(self, kernel: SimKernel, default_link: LinkParams = DEFAULT_LINK) -> None:
        self.kernel = kernel
        self.default_link = default_link
        self._links: dict[tuple[str, str], LinkParams] = {}
        self._busy_until: dict[tuple[str, str], int] = {}
        self._inboxes: dict[str, SimChannel] = {}
        self._partitioned: set[tuple[str, str]] = set()
        self._drop_rng = kernel.rng_for("link-drops")

    def add_node(self, node_id: str) -> SimChannel:
        if node_id in self._inboxes:
            raise ConfigError(f"duplicate node id {node_id}")
        inbox = SimChannel(self.kernel)
        self._inboxes[node_id] = inbox
        return inbox

    def remove_node(self, node_id: str) -> None:
        inbox = self._inboxes.pop(node_id, None)
        if inbox is not None:
            inbox.close()

    def set_link(self, src: str, dst: str, params: LinkParams) -> None:
        self._links[(src, dst)] = params

    def link(self, src: str, dst: str) -> LinkParams:
        return self._links.get((src, dst), self.default_link)

    def partition(self, a: str, b: str) -> None:
        self._partitioned.add((a, b))
        self._partitioned.add((b, a))

    def heal(self, a: str, b: str) -> None:
        self._partitioned.discard((a, b))
        self._partitioned.discard((b, a))

    def _trace(self, kind: str, seq: int, src: str, dst: str, msg: str, size: int) -> None:
        self.kernel.trace.append(
            f"t={self.kernel.now_us:012d}us #{seq:06d} {src} -> {dst} {kind} {msg} {size}B"
        )

    def send(self, src: str, dst: str, payload: object, reply_to: int = 0) -> int:
        seq = self.kernel.next_send_seq()
        envelope = Envelope(src=src, dst=dst, seq=seq, reply_to=reply_to, payload=payload)
        wire = frame(encode(envelope))
        size = len(wire)
        msg = type(payload).__name__
        if dst not in self._inboxes:
            self._trace("drop", seq, src, dst, msg, size)
            raise Unreachable(dst)
        self._trace("send", seq, src, dst, msg, size)
        if (src, dst) in self._partitioned:
            self._trace("lost", seq, src, dst, msg, size)
            return seq
        params = self.link(src, dst)
        if params.drop_rate > 0.0 and self._drop_rng.random() < params.drop_rate:
            self._trace("lost", seq, src, dst, msg, size)
            return seq
        start = max(self.kernel.now_us, self._busy_until.get((src, dst), 0))
        done = start + params.transmit_us(size)
        self._busy_until[(src, dst)] = done
        deliver_at = done + params.latency_us

        def deliver() -> None:
            inbox = self._inboxes.get(dst)
            if inbox is None:
                self._trace("drop", seq, src, dst, msg, size)
                return
            self._trace("recv", seq, src, dst, msg, size)
            inbox.put(decode(wire[4:]))

        self.kernel.schedule(deliver_at - self.kernel.now_us, deliver)
        return seq


# ---------------------------------------------------------------------------
# Environment handed to node code
# ---------------------------------------------------------------------------


class Env:
    """What node code sees: clock, sleep, spawn, channels, messaging, rng."""

    node_id: str
    rng: random.Random

    def now_ms(self) -> int:
        raise NotImplementedError

    def sleep_ms(self, ms: int) -> None:
        raise NotImplementedError

    def spawn(self, fn: Callable[[], None], name: str, *, service: bool = False) -> None:
        raise NotImplementedError

    def new_channel(self) -> Channel:
        raise NotImplementedError

    def send(self, dst: str, payload: object, reply_to: int = 0) -> int:
        raise NotImplementedError

    @property
    def inbox(self) -> Channel:
        raise NotImplementedError

    def close(self) -> None:
        raise NotImplementedError


class SimEnv(Env):
    def __init__(self, kernel: SimKernel, transport: SimTransport, node_id: str) -> None:
        self.kernel = kernel
        self.transport = transport
        self.node_id = node_id
        self._inbox = transport.add_node(node_id)
        self.rng = kernel.rng_for(f"node/{node_id}")

    def now_ms(self) -> int:
        return self.kernel.now_us // 1000

    def sleep_ms(self, ms: int) -> None:
        self.kernel.sleep_us(ms * 1000)

    def spawn(self, fn: Callable[[], None], name: str, *, service: bool = False) -> None:
        self.kernel.spawn(fn, f"{self.node_id}/{name}", service=service)

    def new_channel(self) -> Channel:
        return SimChannel(self.kernel)

    def send(self, dst: str, payload: object, reply_to: int = 0) -> int:
        return self.transport.send(self.node_id, dst, payload, reply_to)

    @property
    def inbox(self) -> Channel:
        return self._inbox

    def close(self) -> None:
        self.transport.remove_node(self.node_id)


# ---------------------------------------------------------------------------
# Socket transport
# ---------------------------------------------------------------------------


def socket_serve(
    address: tuple[str, int], on_frame: Callable[[bytes], None]
) -> tuple[socket.socket, tuple[str, int]]:
    """Listen on ``address``; feed each received frame body to ``on_frame``.

    Returns the live server socket and its actual bound address (useful when
    binding port 0). Accept and reader threads are daemons; closing the
    server socket stops the accept loop.
    """
    try:
        server = socket.create_server(address)
    except OSError as exc:
        raise Unreachable(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
    server.settimeout(0.2)

    def reader(conn: socket.socket) -> None:
        try:
            with conn, conn.makefile("rb") as fh:
                while True:
                    header = fh.read(4)
                    if len(header) != 4:
                        return
                    length = int.from_bytes(header, "big")
                    body = fh.read(length)
                    if len(body) != length:
                        return
                    on_frame(body)
        except OSError:
            return

    def accept_loop() -> None:
        while True:
            try:
                conn, _ = server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            threading.Thread(target=reader, args=(conn,), daemon=True).start()

    threading.Thread(target=accept_loop, name=f"listen:{address}", daemon=True).start()
    return server, server.getsockname()[:2]


def socket_connect(address: tuple[str, int], timeout: float = 5.0) -> socket.socket:
    try:
        return socket.create_connection(address, timeout=timeout)
    except OSError as exc:
        raise ConnectFailed(
            f"cannot connect {address[0]}:{address[1]}: {exc}"
        ) from exc


class RealEnv(Env):
    """Wall-clock environment speaking Envelope frames over TCP."""

    def __init__(
        self,
        node_id: str,
        address_book: dict[str, tuple[str, int]],
        listen: tuple[str, int] | None,
    ) -> None:
        self.node_id = node_id
        self.address_book = address_book
        self.rng = random.Random()
        self._t0 = time.monotonic()
        self._inbox = RealChannel()
        self._channels: list[RealChannel] = [self._inbox]
        self._conns: dict[str, socket.socket] = {}
        self._conn_lock = threading.Lock()
        self._seq = itertools.count(1)
        self._seq_lock = threading.Lock()
        self._server: socket.socket | None = None
        if listen is not None:
            self._server, bound = socket_serve(listen, self._on_frame)
            self.address_book[node_id] = bound

    def bound_address(self) -> tuple[str, int]:
        address = self.address_book.get(self.node_id)
        if address is None:
            raise BbsError(f"{self.node_id} is not listening")
        return address

    def _on_frame(self, body: bytes) -> None:
        try:
            envelope = decode(body)
        except BbsError:
            return
        if isinstance(envelope, Envelope):
            self._inbox.put(envelope)

    def now_ms(self) -> int:
        return int((time.monotonic() - self._t0) * 1000)

    def sleep_ms(self, ms: int) -> None:
        time.sleep(ms / 1000.0)

    def spawn(self, fn: Callable[[], None], name: str, *, service: bool = False) -> None:
        def runner() -> None:
            try:
                fn()
            except ShuttingDown:
                pass

        threading.Thread(target=runner, name=f"{self.node_id}/{name}", daemon=True).start()

    def new_channel(self) -> Channel:
        channel = RealChannel()
        self._channels.append(channel)
        return channel

    def send(self, dst: str, payload: object, reply_to: int = 0) -> int:
        with self._seq_lock:
            seq = next(self._seq)
        envelope = Envelope(src=self.node_id, dst=dst, seq=seq, reply_to=reply_to, payload=payload)
        wire = frame(encode(envelope))
        with self._conn_lock:
            conn = self._conns.get(dst)
            if conn is None:
                address = self.address_book.get(dst)
                if address is None:
                    raise Unreachable(dst)
                conn = socket_connect(address)
                self._conns[dst] = conn
            try:
                conn.sendall(wire)
            except OSError as exc:
                self._conns.pop(dst, None)
                try:
                    conn.close()
                finally:
                    pass
                raise Unreachable(f"{dst}: {exc}") from exc
        return seq

    @property
    def inbox(self) -> Channel:
        return self._inbox

    def close(self) -> None:
        if self._server is not None:
            self._server.close()
        with self._conn_lock:
            for conn in self._conns.values():
                try:
                    conn.close()
                except OSError:
                    pass
            self._conns.clear()
        for channel in self._channels:
            channel.close()
