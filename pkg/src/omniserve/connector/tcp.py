"""TCP transport: a broker holding control channels, keys and payload blobs.

Senders and receivers are both broker clients. Small payloads ride inside
control frames; larger ones are uploaded as separate blob frames and the
control message carries only the blob's stream id.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import struct
import threading

from .errors import (
    ConnectorError,
    ConnectorTimeout,
    KeyConsumed,
    MissingKey,
    PortInUse,
    TransportDown,
)
from .planes import ChannelTable, Claim, KeyTable
from .wire import (
    ControlMessage,
    ErrorCode,
    MessageKind,
    Op,
    TcpRef,
    decode_message,
    decode_message_prefix,
    encode_message,
    pack_str,
    read_frame,
    unpack_str,
    write_frame,
)

log = logging.getLogger(__name__)

_FOREVER = 0xFFFFFFFF


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not host:
        raise ValueError(f"endpoint must look like host:port, got {endpoint!r}")
    return host, int(port)


def _timeout_ms(timeout: float | None) -> int:
    if timeout is None:
        return _FOREVER
    return max(0, min(int(timeout * 1000), _FOREVER - 1))


def _ack(value: int = 0) -> tuple[int, bytes]:
    frame = encode_message(ControlMessage(MessageKind.ACK, value=value))
    return frame[4], frame[5:]


def _error(code: ErrorCode, text: str) -> tuple[int, bytes]:
    return Op.ERROR, bytes((code,)) + pack_str(text[:1000])


class _BrokerState:
    def __init__(self) -> None:
        cond = threading.Condition()
        self.lock = threading.Lock()
        self.channels = ChannelTable(cond)
        self.keys = KeyTable(cond)
        self.blobs: dict[int, tuple[int, bytes]] = {}
        self.ids = itertools.count(1)

    def handle(self, tag: int, body: bytes) -> tuple[int, bytes]:
        if tag == Op.BLOB_PUT:
            (rid,) = struct.unpack_from("<Q", body, 0)
            with self.lock:
                sid = next(self.ids)
                self.blobs[sid] = (rid, body[8:])
            return _ack(sid)
        if tag == Op.BLOB_GET:
            sid, consume = struct.unpack_from("<QB", body, 0)
            with self.lock:
                item = self.blobs.pop(sid, None) if consume else self.blobs.get(sid)
            if item is None:
                return _error(ErrorCode.MISSING, f"no blob {sid}")
            return Op.BLOB, item[1]
        if tag == Op.BLOB_RELEASE:
            (sid,) = struct.unpack_from("<Q", body, 0)
            with self.lock:
                item = self.blobs.pop(sid, None)
            return _ack(len(item[1]) if item else 0)
        if tag == Op.APPEND:
            channel, pos = unpack_str(body, 0)
            self.channels.append(channel, decode_message(body[pos:]))
            return _ack()
        if tag == Op.TAKE:
            channel, pos = unpack_str(body, 0)
            (ms,) = struct.unpack_from("<I", body, pos)
            msgs = self.channels.take(channel, ms / 1000)
            return Op.BATCH, struct.pack("<I", len(msgs)) + b"".join(map(encode_message, msgs))
        if tag == Op.CLAIM_KEY:
            key, pos = unpack_str(body, 0)
            (rid,) = struct.unpack_from("<Q", body, pos)
            return _ack(self.keys.claim(key, rid, body[pos + 8:]))
        if tag == Op.UNCLAIM_KEY:
            key, _ = unpack_str(body, 0)
            self.keys.unclaim(key)
            return _ack()
        if tag == Op.PUBLISH_KEY:
            key, pos = unpack_str(body, 0)
            self.keys.publish(key, decode_message(body[pos:]))
            return _ack()
        if tag == Op.WAIT_KEY:
            key, pos = unpack_str(body, 0)
            ms, take = struct.unpack_from("<IB", body, pos)
            try:
                msg = self.keys.wait(key, None if ms == _FOREVER else ms / 1000, bool(take))
            except KeyConsumed as exc:
                return _error(ErrorCode.CONSUMED, str(exc))
            except ConnectorTimeout as exc:
                return _error(ErrorCode.TIMEOUT, str(exc))
            frame = encode_message(msg)
            return frame[4], frame[5:]
        if tag == Op.DROP_REQUEST:
            (rid,) = struct.unpack_from("<Q", body, 0)
            msgs = self.channels.drop_request(rid) + self.keys.drop_request(rid)
            return Op.BATCH, struct.pack("<I", len(msgs)) + b"".join(map(encode_message, msgs))
        if tag == Op.CLEANUP:
            (rid,) = struct.unpack_from("<Q", body, 0)
            with self.lock:
                gone = [s for s, (r, _) in self.blobs.items() if r == rid]
                freed = sum(len(self.blobs.pop(s)[1]) for s in gone)
            return _ack(freed)
        if tag == Op.STATS:
            with self.lock:
                return _ack(sum(len(b) for _, b in self.blobs.values()))
        return _error(ErrorCode.PROTOCOL, f"unknown op {tag:#x}")


class _Handler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        state: _BrokerState = self.server.state  # type: ignore[attr-defined]
        while True:
            try:
                tag, body = read_frame(sock)
            except (EOFError, OSError):
                return
            try:
                rtag, rbody = state.handle(tag, body)
            except Exception as exc:  # malformed frame: reply, keep serving
                log.debug("broker rejected frame %#x: %s", tag, exc)
                rtag, rbody = _error(ErrorCode.PROTOCOL, str(exc))
            try:
                write_frame(sock, rtag, rbody)
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpBroker:
    """Threaded loopback/LAN broker; ``port`` 0 picks an ephemeral port."""

    def __init__(self, endpoint: str = "127.0.0.1:0"):
        host, port = parse_endpoint(endpoint)
        try:
            self._server = _Server((host, port), _Handler, bind_and_activate=True)
        except OSError as exc:
            raise PortInUse(f"cannot bind {endpoint}: {exc}") from exc
        self._server.state = _BrokerState()  # type: ignore[attr-defined]
        self._thread = threading.Thread(target=self._server.serve_forever, kwargs={"poll_interval": 0.05},
                                        daemon=True, name=f"omni-broker-{port}")
        self._thread.start()

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()


class TcpClient:
    """One blocking connection per calling thread."""

    def __init__(self, endpoint: str, connect_timeout: float = 5.0):
        self.endpoint = endpoint
        self._addr = parse_endpoint(endpoint)
        self._connect_timeout = connect_timeout
        self._local = threading.local()
        self._all: list[socket.socket] = []
        self._lock = threading.Lock()
        self._closed = False

    def _sock(self) -> socket.socket:
        sock = getattr(self._local, "sock", None)
        if sock is None:
            if self._closed:
                raise TransportDown(f"client for {self.endpoint} is closed")
            try:
                sock = socket.create_connection(self._addr, timeout=self._connect_timeout)
            except OSError as exc:
                raise TransportDown(f"cannot reach broker {self.endpoint}: {exc}") from exc
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._local.sock = sock
            with self._lock:
                self._all.append(sock)
        return sock

    def call(self, tag: int, body: bytes = b"") -> tuple[int, bytes]:
        sock = self._sock()
        try:
            write_frame(sock, tag, body)
            rtag, rbody = read_frame(sock)
        except (OSError, EOFError) as exc:
            self._local.sock = None
            raise TransportDown(f"broker {self.endpoint}: {exc}") from exc
        if rtag == Op.ERROR:
            code, text = rbody[0], unpack_str(rbody, 1)[0]
            if code == ErrorCode.TIMEOUT:
                raise ConnectorTimeout(text)
            if code == ErrorCode.CONSUMED:
                raise KeyConsumed(text)
            if code == ErrorCode.MISSING:
                raise MissingKey(text)
            raise ConnectorError(text)
        return rtag, rbody

    def call_ack(self, tag: int, body: bytes = b"") -> int:
        rtag, rbody = self.call(tag, body)
        if rtag != MessageKind.ACK:
            raise ConnectorError(f"expected ACK, got tag {rtag:#x}")
        return decode_message(struct.pack("<IB", len(rbody) + 1, rtag) + rbody).value

    def call_batch(self, tag: int, body: bytes) -> list[ControlMessage]:
        rtag, rbody = self.call(tag, body)
        if rtag != Op.BATCH:
            raise ConnectorError(f"expected BATCH, got tag {rtag:#x}")
        (count,) = struct.unpack_from("<I", rbody, 0)
        pos, out = 4, []
        for _ in range(count):
            msg, pos = decode_message_prefix(rbody, pos)
            out.append(msg)
        return out

    def close(self) -> None:
        self._closed = True
        with self._lock:
            for s in self._all:
                try:
                    s.close()
                except OSError:
                    pass
            self._all.clear()


class TcpControlPlane:
    def __init__(self, client: TcpClient):
        self.client = client

    def append(self, channel: str, msg: ControlMessage) -> None:
        self.client.call_ack(Op.APPEND, pack_str(channel) + encode_message(msg))

    def take(self, channel: str, timeout: float = 0.0) -> list[ControlMessage]:
        return self.client.call_batch(Op.TAKE, pack_str(channel) + struct.pack("<I", _timeout_ms(timeout)))

    def claim_key(self, key: str, request_id: int, digest: bytes) -> Claim:
        return Claim(self.client.call_ack(Op.CLAIM_KEY, pack_str(key) + struct.pack("<Q", request_id) + digest))

    def unclaim_key(self, key: str) -> None:
        self.client.call_ack(Op.UNCLAIM_KEY, pack_str(key))

    def publish_key(self, key: str, msg: ControlMessage) -> None:
        self.client.call_ack(Op.PUBLISH_KEY, pack_str(key) + encode_message(msg))

    def wait_key(self, key: str, timeout: float | None, take: bool = False) -> ControlMessage:
        body = pack_str(key) + struct.pack("<IB", _timeout_ms(timeout), int(take))
        rtag, rbody = self.client.call(Op.WAIT_KEY, body)
        return decode_message(struct.pack("<IB", len(rbody) + 1, rtag) + rbody)

    def drop_request(self, request_id: int) -> list[ControlMessage]:
        return self.client.call_batch(Op.DROP_REQUEST, struct.pack("<Q", request_id))

    def close(self) -> None:
        pass


class TcpDataPlane:
    def __init__(self, client: TcpClient):
        self.client = client

    def write(self, request_id: int, data: bytes) -> TcpRef:
        sid = self.client.call_ack(Op.BLOB_PUT, struct.pack("<Q", request_id) + data)
        return TcpRef(sid, len(data))

    def read(self, ref: TcpRef, consume: bool = False) -> bytes:
        rtag, rbody = self.client.call(Op.BLOB_GET, struct.pack("<QB", ref.stream_id, int(consume)))
        if rtag != Op.BLOB:
            raise ConnectorError(f"expected BLOB, got tag {rtag:#x}")
        return rbody

    def take(self, ref: TcpRef) -> bytes:
        return self.read(ref, consume=True)

    def release(self, ref: TcpRef) -> int:
        return self.client.call_ack(Op.BLOB_RELEASE, struct.pack("<Q", ref.stream_id))

    def release_request(self, request_id: int) -> int:
        return self.client.call_ack(Op.CLEANUP, struct.pack("<Q", request_id))

    @property
    def allocated_bytes(self) -> int:
        return self.client.call_ack(Op.STATS)

    def close(self) -> None:
        self.client.close()
