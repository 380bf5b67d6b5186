"""The unified connector: keyed put/get plus ordered per-request streams.

Every edge owns one transport (control plane + data plane) and one
multiplexed control channel. Stream chunks and handoffs for all requests on
an edge travel through that channel; the receiving side pumps it and sorts
messages into per-request buffers, so a late subscriber still sees every
chunk from seq 0.
"""

from __future__ import annotations

import hashlib
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, replace
from urllib.parse import quote

from ..core import Payload, StageId, StreamChunk, TransportKind, WriteConflict
from .errors import (
    AlreadyOpen,
    Backpressure,
    ConnectorTimeout,
    PortInUse,
    ProtocolViolation,
)
from .planes import Claim, HeapDataPlane, LocalControlPlane, ShmDataPlane
from .tcp import TcpBroker, TcpClient, TcpControlPlane, TcpDataPlane
from .wire import ControlMessage, HeapRef, Inline, Locator, MessageKind, ShmRef, TcpRef

log = logging.getLogger(__name__)

Edge = tuple[StageId, StageId]

DEFAULT_INLINE_THRESHOLD = 4096
DEFAULT_SHM_REGION_BYTES = 64 << 20


@dataclass(frozen=True)
class TransportConfig:
    kind: TransportKind = TransportKind.INPROC
    inline_threshold: int = DEFAULT_INLINE_THRESHOLD
    shm_region_bytes: int = DEFAULT_SHM_REGION_BYTES
    tcp_endpoint: str = "127.0.0.1:0"
    timeout_s: float = 5.0
    high_watermark: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TransportKind(self.kind))
        if self.inline_threshold < 0:
            raise ValueError("inline_threshold must be >= 0")
        if self.shm_region_bytes <= 0:
            raise ValueError("shm_region_bytes must be positive")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be positive")
        if self.high_watermark is not None and self.high_watermark < 1:
            raise ValueError("high_watermark must be >= 1 when set")

    @classmethod
    def from_env(cls, edge_name: str, base: "TransportConfig") -> "TransportConfig":
        """Apply ``OMNI_SHM_BYTES`` / ``OMNI_TCP_ENDPOINT`` overrides.

        A variable suffixed with the edge name (non-alphanumerics mapped to
        ``_``, e.g. ``OMNI_TCP_ENDPOINT__THINKER__TALKER``) wins over the
        global one.
        """
        suffix = "".join(c if c.isalnum() else "_" for c in edge_name).upper()
        changes: dict = {}
        for var, field_name, conv in (
            ("OMNI_SHM_BYTES", "shm_region_bytes", int),
            ("OMNI_TCP_ENDPOINT", "tcp_endpoint", str),
            ("OMNI_INLINE_THRESHOLD", "inline_threshold", int),
        ):
            raw = os.environ.get(f"{var}__{suffix}", os.environ.get(var))
            if raw is not None:
                changes[field_name] = conv(raw)
        return replace(base, **changes) if changes else base


@dataclass(frozen=True)
class ConnectorKey:
    request_id: int
    edge: Edge
    tag: str

    @property
    def canonical(self) -> str:
        # quoting every component keeps the encoding injective even when
        # stage names or tags contain '/', '->' or ':'
        src, dst = (quote(s, safe="") for s in self.edge)
        return f"req:{self.request_id}/edge:{src}->{dst}/{quote(self.tag, safe='')}"


def _digest(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()


class _Transport:
    """Control plane plus data plane for one edge."""

    def __init__(self, edge: Edge, cfg: TransportConfig, server_id: str, broker: TcpBroker | None):
        self.edge = edge
        self.cfg = cfg
        self.broker = broker
        self.region: str | None = None
        if cfg.kind == TransportKind.TCP:
            assert broker is not None
            client = TcpClient(broker.endpoint, connect_timeout=cfg.timeout_s)
            self.control = TcpControlPlane(client)
            self.data = TcpDataPlane(client)
        else:
            self.control = LocalControlPlane()
            if cfg.kind == TransportKind.SHM:
                self.region = f"omni.{server_id}.{edge[0]}->{edge[1]}"
                self.data = ShmDataPlane(self.region, cfg.shm_region_bytes)
            else:
                self.data = HeapDataPlane()

    def encode(self, request_id: int, p: Payload, blob: bytes | None = None) -> tuple[Locator, int]:
        if blob is None:
            blob = p.to_bytes()
        if p.nbytes <= self.cfg.inline_threshold:
            return Inline(blob), p.nbytes
        return self.data.write(request_id, blob), p.nbytes

    def resolve(self, loc: Locator | None, consume: bool) -> bytes:
        if loc is None:
            raise ProtocolViolation("control message carries no locator")
        if isinstance(loc, Inline):
            return loc.data
        if isinstance(loc, (ShmRef, TcpRef, HeapRef)):
            return self.data.take(loc) if consume else self.data.read(loc)
        raise ProtocolViolation(f"unsupported locator {type(loc).__name__}")

    def close(self) -> None:
        self.control.close()
        self.data.close()


@dataclass
class _Inbox:
    chunks: deque[StreamChunk]
    next_seq: int = 0
    closed: bool = False
    delivered: int = 0
    subscribed: bool = False


class _EdgeChannel:
    """Receiver-side demultiplexer of one edge's control channel."""

    def __init__(self, transport: _Transport):
        self.t = transport
        self.name = f"edge:{transport.edge[0]}->{transport.edge[1]}"
        self.lock = threading.RLock()
        self.inboxes: dict[int, _Inbox] = {}
        self.handoffs: deque[tuple[int, bytes]] = deque()
        self.sent = 0  # messages appended by local senders and not yet pumped
        self.dropped: set[int] = set()
        self.ready: set[int] = set()  # requests with undelivered chunks

    def inbox(self, request_id: int) -> _Inbox:
        box = self.inboxes.get(request_id)
        if box is None:
            box = self.inboxes[request_id] = _Inbox(deque())
        return box

    def append(self, msg: ControlMessage) -> None:
        self.t.control.append(self.name, msg)
        with self.lock:
            self.sent += 1

    def pump(self, timeout: float = 0.0, force: bool = False) -> int:
        """Move every pending channel message into inboxes; returns count."""
        with self.lock:
            if not force and self.sent == 0 and timeout <= 0:
                return 0
            msgs = self.t.control.take(self.name, timeout)
            self.sent = max(0, self.sent - len(msgs))
            for m in msgs:
                self._route(m)
            return len(msgs)

    def _route(self, m: ControlMessage) -> None:
        if m.request_id in self.dropped:
            self._discard(m)
            return
        if m.kind == MessageKind.HANDOFF:
            self.handoffs.append((m.request_id, self.t.resolve(m.locator, consume=True)))
            return
        if m.kind not in (MessageKind.CHUNK_NOTICE, MessageKind.EOS):
            raise ProtocolViolation(f"unexpected {m.kind.name} on {self.name}")
        box = self.inbox(m.request_id)
        payload = Payload.from_bytes(self.t.resolve(m.locator, consume=True))
        box.chunks.append(
            StreamChunk(m.request_id, self.t.edge, m.seq, payload, m.kind == MessageKind.EOS)
        )
        self.ready.add(m.request_id)

    def _discard(self, m: ControlMessage) -> None:
        if m.locator is not None and not isinstance(m.locator, Inline):
            self.t.data.release(m.locator)

    def outstanding(self, request_id: int, sent: int) -> int:
        with self.lock:
            box = self.inboxes.get(request_id)
            return sent - (box.delivered if box else 0)


class StreamSender:
    """Producer end of one (request, edge) stream; enforces contiguous seq."""

    def __init__(self, conn: "Connector", ch: _EdgeChannel, request_id: int):
        self._conn = conn
        self._ch = ch
        self.request_id = request_id
        self.next_seq = 0
        self.closed = False

    @property
    def edge(self) -> Edge:
        return self._ch.t.edge

    def send(self, seq: int, payload: Payload, eos: bool = False) -> None:
        if self.closed:
            raise ProtocolViolation(f"request {self.request_id} on {self._ch.name}: send after eos")
        if seq != self.next_seq:
            what = "duplicate" if seq < self.next_seq else "out-of-order"
            raise ProtocolViolation(
                f"request {self.request_id} on {self._ch.name}: {what} seq {seq}, expected {self.next_seq}"
            )
        hw = self._ch.t.cfg.high_watermark
        if hw is not None and self._ch.outstanding(self.request_id, self.next_seq) >= hw:
            raise Backpressure(f"{self._ch.name}: {hw} chunks of request {self.request_id} unconsumed")
        loc, n = self._ch.t.encode(self.request_id, payload)
        kind = MessageKind.EOS if eos else MessageKind.CHUNK_NOTICE
        self._ch.append(ControlMessage(kind, self.request_id, self.edge, "", seq, n, 0, loc))
        self.next_seq += 1
        self.closed = eos

    def send_chunk(self, chunk: StreamChunk) -> None:
        self.send(chunk.seq, chunk.payload, chunk.eos)


class StreamReceiver:
    """Consumer end of one (request, edge) stream."""

    def __init__(self, ch: _EdgeChannel, request_id: int):
        self._ch = ch
        self.request_id = request_id

    @property
    def edge(self) -> Edge:
        return self._ch.t.edge

    @property
    def closed(self) -> bool:
        with self._ch.lock:
            box = self._ch.inboxes.get(self.request_id)
            return bool(box and box.closed)

    def poll(self) -> list[StreamChunk]:
        """Every chunk available right now, in seq order, each exactly once."""
        ch = self._ch
        ch.pump()
        with ch.lock:
            box = ch.inbox(self.request_id)
            out = []
            while box.chunks:
                c = box.chunks.popleft()
                if box.closed:
                    raise ProtocolViolation(f"{ch.name}: chunk {c.seq} after eos")
                if c.seq != box.next_seq:
                    raise ProtocolViolation(f"{ch.name}: got seq {c.seq}, expected {box.next_seq}")
                box.next_seq += 1
                box.delivered += 1
                box.closed = c.eos
                out.append(c)
            ch.ready.discard(self.request_id)
            return out

    def recv(self, timeout: float | None = None) -> StreamChunk:
        """Block for the next chunk."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            with self._ch.lock:
                box = self._ch.inbox(self.request_id)
                have = bool(box.chunks)
            if have:
                return self._pop_one()
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise ConnectorTimeout(f"{self._ch.name}: no chunk for request {self.request_id}")
            self._ch.pump(timeout=min(0.05, remaining) if remaining is not None else 0.05, force=True)

    def _pop_one(self) -> StreamChunk:
        with self._ch.lock:
            box = self._ch.inbox(self.request_id)
            c = box.chunks[0]
            if box.closed or c.seq != box.next_seq:
                raise ProtocolViolation(f"{self._ch.name}: unexpected chunk seq {c.seq}")
            box.chunks.popleft()
            if not box.chunks:
                self._ch.ready.discard(self.request_id)
            box.next_seq += 1
            box.delivered += 1
            box.closed = c.eos
            return c

    def __iter__(self):
        while not self.closed:
            yield self.recv()


class Connector:
    """Hub over every edge of a deployment, one transport per edge."""

    def __init__(self, edges: dict[Edge, TransportConfig], server_id: str | None = None):
        self.server_id = server_id or f"{os.getpid()}-{id(self):x}"
        self._brokers: dict[str, TcpBroker] = {}
        self._channels: dict[Edge, _EdgeChannel] = {}
        self._senders: set[tuple[int, Edge]] = set()
        self._subscribers: set[tuple[int, Edge]] = set()
        self._lock = threading.Lock()
        self._closed = False
        try:
            for edge in sorted(edges):
                cfg = edges[edge]
                broker = self._broker_for(cfg) if cfg.kind == TransportKind.TCP else None
                self._channels[edge] = _EdgeChannel(_Transport(edge, cfg, self.server_id, broker))
        except Exception:
            self.close()
            raise

    def _broker_for(self, cfg: TransportConfig) -> TcpBroker:
        port = cfg.tcp_endpoint.rpartition(":")[2]
        if port != "0" and cfg.tcp_endpoint in self._brokers:
            raise PortInUse(f"endpoint {cfg.tcp_endpoint} is assigned to more than one edge")
        broker = TcpBroker(cfg.tcp_endpoint)
        self._brokers[cfg.tcp_endpoint if port != "0" else broker.endpoint] = broker
        return broker

    # -- helpers -------------------------------------------------------
    def channel(self, edge: Edge) -> _EdgeChannel:
        try:
            return self._channels[tuple(edge)]  # type: ignore[index]
        except KeyError:
            raise KeyError(f"connector has no edge {edge[0]}->{edge[1]}") from None

    @property
    def edges(self) -> list[Edge]:
        return list(self._channels)

    def transport_config(self, edge: Edge) -> TransportConfig:
        return self.channel(edge).t.cfg

    def endpoint(self, edge: Edge) -> str | None:
        b = self.channel(edge).t.broker
        return b.endpoint if b else None

    # -- keyed put/get -------------------------------------------------
    def put(self, key: ConnectorKey, p: Payload) -> ControlMessage:
        """Store ``p`` under ``key`` (write-once; identical bytes are a no-op)."""
        t = self.channel(key.edge).t
        name = key.canonical
        blob = p.to_bytes()
        claim = t.control.claim_key(name, key.request_id, _digest(blob))
        if claim == Claim.CONFLICT:
            raise WriteConflict(f"{name} already holds different bytes")
        ack = ControlMessage(MessageKind.ACK, key.request_id, key.edge, key.tag, nbytes=p.nbytes)
        if claim == Claim.SAME:
            return ack
        try:
            loc, n = t.encode(key.request_id, p, blob)
            t.control.publish_key(
                name, ControlMessage(MessageKind.PUT_NOTICE, key.request_id, key.edge, key.tag, -1, n, 0, loc)
            )
        except BaseException:
            t.control.unclaim_key(name)
            raise
        return replace(ack, locator=loc)

    def get(self, key: ConnectorKey, timeout: float | None = None, consume: bool = True) -> Payload:
        """Wait for ``key``; a consuming get frees the payload's storage."""
        t = self.channel(key.edge).t
        if timeout is None:
            timeout = t.cfg.timeout_s
        msg = t.control.wait_key(key.canonical, timeout, take=consume)
        return Payload.from_bytes(t.resolve(msg.locator, consume=consume))

    def locator_for(self, key: ConnectorKey) -> Locator | None:
        """Locator of a published key without consuming it."""
        msg = self.channel(key.edge).t.control.wait_key(key.canonical, 0.0, take=False)
        return msg.locator

    # -- streams -------------------------------------------------------
    def open_stream(self, request_id: int, edge: Edge) -> StreamSender:
        token = (request_id, tuple(edge))
        with self._lock:
            if token in self._senders:
                raise AlreadyOpen(f"stream {edge[0]}->{edge[1]} for request {request_id} already open")
            self._senders.add(token)  # type: ignore[arg-type]
        return StreamSender(self, self.channel(edge), request_id)

    def subscribe(self, request_id: int, edge: Edge) -> StreamReceiver:
        token = (request_id, tuple(edge))
        with self._lock:
            if token in self._subscribers:
                raise AlreadyOpen(f"request {request_id} already subscribed to {edge[0]}->{edge[1]}")
            self._subscribers.add(token)  # type: ignore[arg-type]
        return StreamReceiver(self.channel(edge), request_id)

    def pending(self, edge: Edge, force: bool = False) -> list[int]:
        """Pump ``edge`` and list requests that have chunks waiting."""
        ch = self.channel(edge)
        ch.pump(force=force)
        with ch.lock:
            return sorted(ch.ready)

    # -- handoffs ------------------------------------------------------
    def handoff(self, request_id: int, edge: Edge, blob: bytes) -> None:
        ch = self.channel(edge)
        p = Payload(0, (len(blob),), blob)
        loc, n = ch.t.encode(request_id, p)
        ch.append(ControlMessage(MessageKind.HANDOFF, request_id, tuple(edge), "", -1, n, 0, loc))  # type: ignore[arg-type]

    def take_handoffs(self, edge: Edge) -> list[tuple[int, bytes]]:
        ch = self.channel(edge)
        ch.pump()
        with ch.lock:
            out = [(rid, Payload.from_bytes(b).data) for rid, b in ch.handoffs]
            ch.handoffs.clear()
        return out

    # -- lifecycle -----------------------------------------------------
    def cleanup(self, request_id: int) -> int:
        """Release every key, buffer and data extent of a finished request."""
        freed = 0
        for edge, ch in self._channels.items():
            with ch.lock:
                ch.pump()
                ch.dropped.add(request_id)
                for _ in ch.t.control.drop_request(request_id):
                    ch.sent = max(0, ch.sent - 1)
                ch.ready.discard(request_id)
                box = ch.inboxes.pop(request_id, None)
                if box is not None:
                    freed += sum(c.payload.nbytes for c in box.chunks)
                ch.handoffs = deque((r, b) for r, b in ch.handoffs if r != request_id)
                freed += ch.t.data.release_request(request_id)
            with self._lock:
                self._senders.discard((request_id, edge))
                self._subscribers.discard((request_id, edge))
        return freed

    def allocated_bytes(self, edge: Edge | None = None) -> int:
        chans = [self.channel(edge)] if edge is not None else list(self._channels.values())
        return sum(ch.t.data.allocated_bytes for ch in chans)

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for ch in self._channels.values():
            try:
                ch.t.close()
            except Exception as exc:  # closing best-effort
                log.debug("closing %s: %s", ch.name, exc)
        for b in self._brokers.values():
            b.close()
        self._brokers.clear()

    def __enter__(self) -> "Connector":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
