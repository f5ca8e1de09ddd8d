"""Message routing and accounting shared by the in-memory and TCP transports.

All traffic passes through a :class:`Hub` owned by the server side. Clients
hold one upstream channel. The hub routes public-key shares to the key
manager, broadcasts the aggregated key it returns, and delivers everything
else to the server's inbox. Byte accounting happens here, so both transports
produce identical ledgers for identical runs.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from collections import defaultdict

from ..errors import Abort, FormatError, ProtocolError
from .messages import (
    DEFAULT_MAX_FRAME,
    FRAME_OVERHEAD,
    KEYMANAGER_ID,
    PROTOCOL_VERSION,
    SERVER_ID,
    Kind,
    Message,
    content_size,
    decode_frame,
    encode_frame,
    pack_hello,
    read_frame,
    unpack_hello,
)

logger = logging.getLogger(__name__)


class TrafficLedger:
    """Per-round message counts and byte totals by kind (thread-safe)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._rows = defaultdict(lambda: defaultdict(lambda: [0, 0, 0]))

    def record(self, msg: Message) -> None:
        content = content_size(msg)
        overhead = FRAME_OVERHEAD + len(msg.payload) - content
        with self._lock:
            row = self._rows[msg.round][msg.kind]
            row[0] += 1
            row[1] += content
            row[2] += overhead

    def round_summary(self, rnd: int) -> dict[Kind, tuple[int, int, int]]:
        """kind -> (messages, content bytes, framing/header bytes)."""
        with self._lock:
            return {k: tuple(v) for k, v in sorted(self._rows.get(rnd, {}).items())}

    def rounds(self) -> list[int]:
        with self._lock:
            return sorted(self._rows)


class Hub:
    def __init__(self, m: int, ref_digest: bytes, max_frame: int = DEFAULT_MAX_FRAME):
        self.m = m
        self.ref_digest = ref_digest
        self.max_frame = max_frame
        self.ledger = TrafficLedger()
        self.server_inbox: queue.Queue = queue.Queue()
        self.km_inbox: queue.Queue = queue.Queue()
        self._client_sinks: dict[int, callable] = {}
        self._km_sink = None
        self._km_pending = False
        self._lock = threading.Lock()
        self.closed = False

    # ----------------------------------------------------------- connection
    def hello(self, msg: Message, sink) -> Message:
        """Validate a Hello and register ``sink(frame_bytes)`` for the party."""
        if msg.kind != Kind.HELLO:
            raise ProtocolError(f"expected HELLO, got {msg.kind.name}")
        version, digest = unpack_hello(msg.payload)
        if version != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version {version} != {PROTOCOL_VERSION}")
        if digest != self.ref_digest:
            raise ProtocolError(f"party {msg.sender} holds a different common reference")
        with self._lock:
            if msg.sender == KEYMANAGER_ID:
                if self._km_sink is not None or self._km_pending:
                    raise ProtocolError("key manager already connected")
                self._km_pending = True
            elif 0 <= msg.sender < self.m:
                if msg.sender in self._client_sinks:
                    raise ProtocolError(f"client {msg.sender} already connected")
                self._client_sinks[msg.sender] = sink
            else:
                raise ProtocolError(f"party id {msg.sender} outside [0, {self.m})")
        return Message(Kind.HELLO, 0, SERVER_ID, pack_hello(self.ref_digest))

    def acknowledged(self, party: int, sink) -> None:
        """Called once the Hello ack is on the wire.

        A remote key manager only starts receiving shares at this point; any
        that arrived earlier are forwarded now, in arrival order.
        """
        if party != KEYMANAGER_ID:
            return
        with self._lock:
            while not self.km_inbox.empty():
                sink(encode_frame(self.km_inbox.get_nowait()))
            self._km_sink = sink

    def connected_clients(self) -> set[int]:
        with self._lock:
            return set(self._client_sinks)

    # -------------------------------------------------------------- inbound
    def from_party(self, msg: Message, sender: int) -> None:
        if msg.sender != sender:
            self.fault(sender, f"frame claims sender {msg.sender}")
            return
        if sender == KEYMANAGER_ID:
            self._from_keymanager(msg)
            return
        self.ledger.record(msg)
        if msg.kind == Kind.PUB_KEY_SHARE:
            with self._lock:
                if self._km_sink is None:
                    self.km_inbox.put(msg)
                else:
                    self._km_sink(encode_frame(msg))
        else:
            self.server_inbox.put(msg)

    def fault(self, sender: int, reason: str) -> None:
        """Turn a transport-level failure into an Abort the round driver will see."""
        logger.warning("fault from party %s: %s", sender, reason)
        self.server_inbox.put(Message(Kind.ABORT, 0, sender, reason.encode()))

    def _from_keymanager(self, msg: Message) -> None:
        if msg.kind == Kind.AGG_PUB_KEY:
            self.keymanager_broadcast(msg)
        elif msg.kind == Kind.ABORT:
            self.server_inbox.put(msg)
        else:
            self.fault(KEYMANAGER_ID, f"key manager sent {msg.kind.name}")

    # ------------------------------------------------------------- outbound
    def to_client(self, cid: int, msg: Message) -> None:
        with self._lock:
            sink = self._client_sinks.get(cid)
        if sink is None:
            raise ProtocolError(f"client {cid} is not connected")
        self.ledger.record(msg)
        sink(encode_frame(msg))

    def broadcast(self, msg: Message, cids=None) -> None:
        for cid in sorted(self.connected_clients() if cids is None else cids):
            self.to_client(cid, msg)

    def keymanager_broadcast(self, msg: Message) -> None:
        # clients first, so the ledger is complete once the server sees the key
        self.broadcast(msg, range(self.m))
        self.server_inbox.put(msg)

    def abort_all(self, reason: str, rnd: int = 0) -> None:
        msg = Message(Kind.ABORT, rnd, SERVER_ID, reason.encode())
        for cid in sorted(self.connected_clients()):
            try:
                self.to_client(cid, msg)
            except Exception:  # a dead connection must not mask the original abort
                logger.debug("could not deliver abort to client %s", cid, exc_info=True)


def _get(q: queue.Queue, timeout: float | None):
    try:
        return q.get(timeout=timeout)
    except queue.Empty:
        raise TimeoutError(f"no message within {timeout} s") from None


class ServerEndpoint:
    def __init__(self, hub: Hub):
        self.hub = hub

    def recv(self, timeout: float | None) -> Message:
        return _get(self.hub.server_inbox, timeout)

    def send_to(self, cid: int, msg: Message) -> None:
        self.hub.to_client(cid, msg)

    def broadcast(self, msg: Message) -> None:
        self.hub.broadcast(msg, range(self.hub.m))

    def abort_all(self, reason: str, rnd: int = 0) -> None:
        self.hub.abort_all(reason, rnd)


class LocalKeyManagerEndpoint:
    """Key manager co-hosted with the hub."""

    def __init__(self, hub: Hub):
        self.hub = hub

    def recv(self, timeout: float | None) -> Message:
        return _get(self.hub.km_inbox, timeout)

    def broadcast(self, msg: Message) -> None:
        self.hub.keymanager_broadcast(msg)


# --------------------------------------------------------------------------
# In-memory transport
# --------------------------------------------------------------------------


class SimChannel:
    """A party's upstream link; frames are fully encoded and decoded as on the wire."""

    def __init__(self, hub: Hub, party_id: int):
        self.hub = hub
        self.party_id = party_id
        self._inbox: queue.Queue = queue.Queue()
        ack = hub.hello(Message(Kind.HELLO, 0, party_id, pack_hello(hub.ref_digest)), self._inbox.put)
        self._inbox.put(encode_frame(ack))
        self.recv(None)

    def send(self, msg: Message) -> None:
        frame = encode_frame(msg)
        decoded, _ = decode_frame(frame, self.hub.max_frame)
        self.hub.from_party(decoded, self.party_id)

    def recv(self, timeout: float | None) -> Message:
        msg, _ = decode_frame(_get(self._inbox, timeout), self.hub.max_frame)
        return msg

    def broadcast(self, msg: Message) -> None:
        self.send(msg)

    def close(self) -> None:
        pass


# --------------------------------------------------------------------------
# TCP transport
# --------------------------------------------------------------------------


class TcpHubServer:
    """Accepts client (and optionally key-manager) connections for a hub."""

    def __init__(self, hub: Hub, host: str = "127.0.0.1", port: int = 0):
        self.hub = hub
        self._sock = socket.create_server((host, port))
        self.address = self._sock.getsockname()[:2]
        self._conns: list[socket.socket] = []
        self._threads: list[threading.Thread] = []
        self._stopping = False
        self._accept_thread = threading.Thread(target=self._accept_loop, name="hub-accept", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._conns.append(conn)
            t = threading.Thread(target=self._serve, args=(conn,), daemon=True)
            self._threads.append(t)
            t.start()

    def _serve(self, conn: socket.socket) -> None:
        rfile = conn.makefile("rb")
        send_lock = threading.Lock()

        def sink(frame: bytes) -> None:
            with send_lock:
                conn.sendall(frame)

        party = None
        try:
            hello = read_frame(rfile, self.hub.max_frame)
            if hello is None:
                return
            try:
                ack = self.hub.hello(hello, sink)
            except ProtocolError as exc:
                sink(encode_frame(Message(Kind.ABORT, 0, SERVER_ID, str(exc).encode())))
                return
            party = hello.sender
            sink(encode_frame(ack))
            self.hub.acknowledged(party, sink)
            while True:
                msg = read_frame(rfile, self.hub.max_frame)
                if msg is None:
                    return
                self.hub.from_party(msg, party)
        except (FormatError, OSError) as exc:
            if party is not None and not self._stopping:
                self.hub.fault(party, f"connection dropped: {exc}")
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def close(self) -> None:
        self._stopping = True
        try:
            self._sock.close()
        except OSError:
            pass
        for conn in self._conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()


class TcpChannel:
    """Upstream link for a client or a remote key manager."""

    def __init__(
        self,
        host: str,
        port: int,
        party_id: int,
        ref_digest: bytes,
        max_frame: int = DEFAULT_MAX_FRAME,
        connect_timeout: float = 30.0,
    ):
        self.party_id = party_id
        self.max_frame = max_frame
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                self._sock = socket.create_connection((host, port), timeout=connect_timeout)
                break
            except OSError:
                if time.monotonic() > deadline:
                    raise
                time.sleep(0.1)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")
        self._lock = threading.Lock()
        self.send(Message(Kind.HELLO, 0, party_id, pack_hello(ref_digest)))
        ack = self.recv(connect_timeout)
        if ack.kind == Kind.ABORT:
            raise Abort(f"server refused connection: {ack.payload.decode(errors='replace')}", phase="Hello")
        if ack.kind != Kind.HELLO:
            raise ProtocolError(f"expected HELLO ack, got {ack.kind.name}")

    def send(self, msg: Message) -> None:
        with self._lock:
            self._sock.sendall(encode_frame(msg))

    def broadcast(self, msg: Message) -> None:
        self.send(msg)

    def recv(self, timeout: float | None) -> Message:
        self._sock.settimeout(timeout)
        try:
            msg = read_frame(self._rfile, self.max_frame)
        except socket.timeout:
            raise TimeoutError(f"no message within {timeout} s") from None
        if msg is None:
            raise Abort("server closed the connection")
        return msg

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass
