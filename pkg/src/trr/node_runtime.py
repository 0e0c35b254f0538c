"""TRR node and client state machines.

A node serves one request per short-lived connection: handshake with a
``vertrr`` frame, receive one ``trr`` frame, then either relay the
payload to the next hop (returning the downstream ``track`` verbatim)
or enqueue the transaction for delayed release and ack immediately.
Connections shut down node by node as each exchange completes.

The client dispatches one onion per route, collects acks, waits out the
largest release delay on the block clock and checks the broadcast view;
unseen transactions trigger a fresh round of routes.

Transport, broadcast view and block clock are injected adapters, so the
same logic runs over real TCP sockets and the in-process simulator.
"""

import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Protocol

from .ec_crypto import KeyPair, keygen_even
from .errors import (
    GiveUp,
    MalformedCipher,
    MalformedRouting,
    NextHopUnreachable,
    NotTrr,
    PeerClosed,
    SizeMismatch,
    TrrError,
    TrrTimeout,
)
from .onion_routing import (
    Forward,
    NodeDescriptor,
    Release,
    build_onion,
    decrypt_ack,
    encrypt_ack,
    peel_layer,
    return_key_point,
    select_routes,
)
from .wire_protocol import (
    FRAME_HEADER_LEN,
    MAX_FRAME_PAYLOAD,
    MAX_TX_SIZE,
    TrrAck,
    dsha256,
    format_ipv4,
    frame_declared_length,
    frame_message,
    parse_frame,
    parse_ipv4,
)

logger = logging.getLogger("trr.node")

ERR_OK = 0
ERR_TIMEOUT = 1
ERR_UNREACHABLE = 2
ERR_PEER_CLOSED = 3
ERR_NOT_TRR = 4
ERR_POOL_FULL = 5
ERR_INVALID_TX = 6

_ERRNO_FOR = {
    TrrTimeout: ERR_TIMEOUT,
    NextHopUnreachable: ERR_UNREACHABLE,
    PeerClosed: ERR_PEER_CLOSED,
    NotTrr: ERR_NOT_TRR,
}

POOL_CAPACITY = 1000
DEFAULT_TIMEOUT = 30.0


def txid(tx: bytes) -> bytes:
    """32-byte double-SHA256 transaction id."""
    return dsha256(tx)


class BroadcastView(Protocol):
    """Adapter standing in for the surrounding broadcast network."""

    def seen_in_blockchain_or_mempool(self, txid: bytes) -> bool: ...

    def broadcast(self, tx: bytes) -> None: ...

    def verify(self, tx: bytes) -> bool: ...


class Transport(Protocol):
    """One full request exchange with a peer: connect, handshake, send
    the packet, return the raw (encrypted) ack bytes, close."""

    def request(self, ip: int, port: int, packet: bytes,
                src_addr=None) -> bytes: ...


class BlockClock(Protocol):
    def height(self) -> int: ...

    def wait_for(self, height: int) -> None: ...


@dataclass
class PendingRelease:
    """Entry in a releasing node's TRR mempool."""

    tx: bytes
    txid: bytes
    release_height: int
    return_pubkey: bytes  # 32-byte x-coordinate from the routing header


class TrrNode:
    """One relay node: peels layers, forwards or releases."""

    def __init__(self, keypair: KeyPair, descriptor: NodeDescriptor,
                 transport, view, rng, *, height: int = 0,
                 pool_capacity: int = POOL_CAPACITY, now=None):
        self.keypair = keypair
        self.descriptor = descriptor
        self.transport = transport
        self.view = view
        self.rng = rng
        self.height = height
        self.pool: list[PendingRelease] = []
        self.pool_capacity = pool_capacity
        self.now = now or (lambda: int(time.time()))
        self.events: list[dict] = []
        self._lock = threading.Lock()

    def _log(self, event: str, **fields) -> None:
        record = {"event": event, "node": self.descriptor.node_id, **fields}
        self.events.append(record)
        if logger.isEnabledFor(logging.DEBUG):
            logger.debug(json.dumps(record, default=repr))

    def _observe_request(self, src_addr, peeled) -> None:
        """Hook for instrumented (attacker-run) nodes; honest no-op."""

    def serve_request(self, packet: bytes, src_addr=None) -> bytes:
        """Handle one decrypted-and-dispatched request; returns the
        encrypted ack bytes to send back.

        Raises MalformedCipher/MalformedRouting when the layer cannot
        be peeled; with no routing header there is no return key, so
        the connection is simply closed and the previous hop reports.
        """
        try:
            peeled = peel_layer(packet, self.keypair.private)
        except (MalformedCipher, MalformedRouting) as exc:
            self._log("peel_failed", error=type(exc).__name__)
            raise
        self._observe_request(src_addr, peeled)
        self._log("received", size=len(packet),
                  kind="forward" if isinstance(peeled, Forward) else "release")
        if isinstance(peeled, Forward):
            return self._handle_forward(peeled)
        return self._handle_release(peeled)

    def _handle_forward(self, fwd: Forward) -> bytes:
        me = self.descriptor
        try:
            ack_bytes = self.transport.request(
                fwd.next_ip, fwd.next_port, fwd.remaining,
                src_addr=(me.ip, me.port))
            self._log("forwarded", next_ip=format_ipv4(fwd.next_ip),
                      next_port=fwd.next_port)
            return ack_bytes  # downstream ack relayed verbatim
        except (TrrTimeout, NextHopUnreachable, PeerClosed, NotTrr) as exc:
            errno = _ERRNO_FOR[type(exc)]
            self._log("forward_failed", next_ip=format_ipv4(fwd.next_ip),
                      errno=errno)
            return self._own_ack(fwd.return_pubkey, errno=errno,
                                 err_ip=fwd.next_ip,
                                 errmsg=type(exc).__name__.encode())

    def _handle_release(self, rel: Release) -> bytes:
        data = rel.trr_data
        me = self.descriptor
        if not self.view.verify(data.tx):
            self._log("verify_failed")
            return self._own_ack(rel.return_pubkey, errno=ERR_INVALID_TX,
                                 err_ip=me.ip, errmsg=b"verify failed")
        with self._lock:
            if len(self.pool) >= self.pool_capacity:
                full = True
            else:
                full = False
                entry = PendingRelease(
                    tx=data.tx, txid=txid(data.tx),
                    release_height=self.height + data.release_delay,
                    return_pubkey=rel.return_pubkey)
                self.pool.append(entry)
        if full:
            self._log("pool_full")
            return self._own_ack(rel.return_pubkey, errno=ERR_POOL_FULL,
                                 err_ip=me.ip, errmsg=b"pool full")
        self._log("enqueued", release_height=entry.release_height,
                  delay=data.release_delay)
        return self._own_ack(rel.return_pubkey, errno=ERR_OK, err_ip=0)

    def _own_ack(self, return_pubkey: bytes, *, errno: int, err_ip: int,
                 errmsg: bytes = b"") -> bytes:
        ack = TrrAck(version=1, time=self.now(), rpt_ip=self.descriptor.ip,
                     err_ip=err_ip, errno=errno, errmsg=errmsg)
        self._log("acked", errno=errno)
        return encrypt_ack(ack, return_key_point(return_pubkey), self.rng)

    def on_new_block(self, height: int) -> list[bytes]:
        """Advance the block clock; broadcast every due transaction that
        is still unseen, returning the list actually released."""
        with self._lock:
            if height <= self.height:
                raise ValueError(
                    f"block height must increase: {height} <= {self.height}")
            self.height = height
            due = [p for p in self.pool if p.release_height <= height]
            self.pool = [p for p in self.pool if p.release_height > height]
        released = []
        for entry in due:
            if self.view.seen_in_blockchain_or_mempool(entry.txid):
                self._log("release_skipped_duplicate",
                          txid=entry.txid.hex()[:16])
                continue
            if not self.view.verify(entry.tx):
                self._log("release_skipped_invalid", txid=entry.txid.hex()[:16])
                continue
            self.view.broadcast(entry.tx)
            self._log("released", txid=entry.txid.hex()[:16], height=height)
            released.append(entry.tx)
        return released


# -- frame connections ----------------------------------------------------

def serve_connection(node: TrrNode, conn) -> None:
    """Drive one inbound connection: vertrr handshake, one trr request,
    one track reply.  Anything else closes the connection."""
    try:
        command, _ = conn.recv_frame()
        if command != "vertrr":
            raise NotTrr(f"first command {command!r} is not vertrr")
        conn.send_frame("vertrr", b"")
        command, payload = conn.recv_frame()
        if command != "trr":
            return
        ack = node.serve_request(payload, src_addr=conn.peer_addr())
        conn.send_frame("track", ack)
    except TrrError:
        return  # refused, timed out, or unpeelable: close without a reply
    finally:
        conn.close()


def request_over_connection(conn, packet: bytes) -> bytes:
    """Client side of one exchange; returns the raw ack bytes."""
    conn.send_frame("vertrr", b"")
    command, _ = conn.recv_frame()
    if command != "vertrr":
        raise NotTrr(f"peer answered {command!r} instead of vertrr")
    conn.send_frame("trr", packet)
    command, payload = conn.recv_frame()
    if command != "track":
        raise PeerClosed(f"expected track, got {command!r}")
    return payload


class FrameSocket:
    """Frame-oriented wrapper over a connected TCP socket."""

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT):
        self._sock = sock
        self._sock.settimeout(timeout)

    def send_frame(self, command: str, payload: bytes) -> None:
        try:
            self._sock.sendall(frame_message(command, payload))
        except OSError as exc:
            raise PeerClosed(f"send failed: {exc}") from exc

    def recv_frame(self) -> tuple[str, bytes]:
        header = self._recv_exact(FRAME_HEADER_LEN)
        length = frame_declared_length(header)
        if length > MAX_FRAME_PAYLOAD:
            raise PeerClosed(f"frame of {length} bytes exceeds read cap")
        return parse_frame(header + self._recv_exact(length))

    def _recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except socket.timeout as exc:
                raise TrrTimeout("peer did not answer in time") from exc
            except OSError as exc:
                raise PeerClosed(f"recv failed: {exc}") from exc
            if not chunk:
                raise PeerClosed("connection closed mid-frame")
            buf += chunk
        return bytes(buf)

    def peer_addr(self):
        try:
            host, port = self._sock.getpeername()[:2]
            return parse_ipv4(host), port
        except (OSError, ValueError):
            return None

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class TcpTransport:
    """Short-lived TCP connection per request."""

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout

    def request(self, ip: int, port: int, packet: bytes, src_addr=None) -> bytes:
        try:
            sock = socket.create_connection((format_ipv4(ip), port),
                                            timeout=self.timeout)
        except OSError as exc:
            raise NextHopUnreachable(
                f"{format_ipv4(ip)}:{port}: {exc}") from exc
        conn = FrameSocket(sock, self.timeout)
        try:
            return request_over_connection(conn, packet)
        finally:
            conn.close()


def run_node_server(node: TrrNode, host: str, port: int, *,
                    timeout: float = DEFAULT_TIMEOUT,
                    stop_event: threading.Event | None = None) -> None:
    """Accept loop for a TCP node; one thread per connection."""
    stop = stop_event or threading.Event()
    with socket.create_server((host, port)) as server:
        server.settimeout(0.2)
        while not stop.is_set():
            try:
                sock, _ = server.accept()
            except socket.timeout:
                continue
            conn = FrameSocket(sock, timeout)
            threading.Thread(target=serve_connection, args=(node, conn),
                             daemon=True).start()


def serve_node(node: TrrNode, host: str, port: int, clock, *,
               timeout: float = DEFAULT_TIMEOUT,
               stop_event: threading.Event | None = None,
               poll_interval: float = 0.2) -> None:
    """Serve TCP connections while following an external block clock."""
    stop = stop_event or threading.Event()
    server = threading.Thread(
        target=run_node_server, args=(node, host, port),
        kwargs={"timeout": timeout, "stop_event": stop}, daemon=True)
    server.start()
    while not stop.is_set():
        height = clock.height()
        if height > node.height:
            node.on_new_block(height)
        time.sleep(poll_interval)
    server.join(timeout=2)


# -- client ----------------------------------------------------------------

@dataclass
class SendPolicy:
    num_routes: int = 3
    hops: int = 3
    delays: tuple[int, ...] = (1, 3, 5)  # cycled across a round's routes
    retry_rounds: int = 3


@dataclass
class RouteAttempt:
    hop_ids: tuple
    delay: int
    ack: TrrAck | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.ack is not None and self.ack.errno == ERR_OK


@dataclass
class SendRound:
    dispatch_height: int
    attempts: list[RouteAttempt] = field(default_factory=list)


@dataclass
class SendReport:
    txid: bytes
    success: bool
    rounds: list[SendRound] = field(default_factory=list)

    @property
    def total_rounds(self) -> int:
        return len(self.rounds)


def client_send(tx: bytes, directory: list[NodeDescriptor],
                policy: SendPolicy, rng, *, transport, view, clock,
                client_addr=(0, 0), exclude_id=None, now=None) -> SendReport:
    """Dispatch tx over policy.num_routes fresh routes, wait out the
    release delay, and retry with new routes until the transaction is
    observed in the broadcast view.

    Raises GiveUp (carrying the report) after policy.retry_rounds
    unsuccessful rounds.
    """
    if len(tx) > MAX_TX_SIZE:
        raise SizeMismatch(f"tx of {len(tx)} bytes exceeds {MAX_TX_SIZE}")
    now = now or (lambda: int(time.time()))
    tid = txid(tx)
    rounds: list[SendRound] = []
    for _ in range(policy.retry_rounds):
        routes = select_routes(directory, policy.num_routes, policy.hops,
                               rng, exclude_id=exclude_id)
        return_kp = keygen_even(rng)
        sent_round = SendRound(dispatch_height=clock.height())
        max_delay = 1
        for i, route in enumerate(routes):
            delay = policy.delays[i % len(policy.delays)]
            max_delay = max(max_delay, delay)
            attempt = RouteAttempt(
                hop_ids=tuple(h.node_id for h in route.hops), delay=delay)
            onion = build_onion(tx, route, delay, return_kp, now(), rng)
            first = route.hops[0]
            try:
                raw_ack = transport.request(first.ip, first.port, onion,
                                            src_addr=client_addr)
                attempt.ack = decrypt_ack(raw_ack, return_kp.private)
            except TrrError as exc:
                attempt.error = f"{type(exc).__name__}: {exc}"
            sent_round.attempts.append(attempt)
        rounds.append(sent_round)
        clock.wait_for(sent_round.dispatch_height + max_delay)
        if view.seen_in_blockchain_or_mempool(tid):
            return SendReport(txid=tid, success=True, rounds=rounds)
    raise GiveUp(f"transaction not observed after {policy.retry_rounds} rounds",
                 report=SendReport(txid=tid, success=False, rounds=rounds))
