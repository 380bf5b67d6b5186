"""Control messages, payload locators and the length-prefixed TCP framing.

Frame layout: ``u32 length (LE) | u8 tag | body`` where ``length`` counts the
tag byte plus the body. Tags 0-4 carry a :class:`ControlMessage`; tags from
0x10 are broker commands and replies.
"""

from __future__ import annotations

import socket
import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union


class MessageKind(IntEnum):
    PUT_NOTICE = 0
    CHUNK_NOTICE = 1
    EOS = 2
    HANDOFF = 3
    ACK = 4


class Op(IntEnum):
    BLOB_PUT = 0x10
    BLOB_GET = 0x11
    BLOB = 0x12
    APPEND = 0x13
    TAKE = 0x14
    BATCH = 0x15
    CLAIM_KEY = 0x16
    PUBLISH_KEY = 0x17
    WAIT_KEY = 0x18
    CLEANUP = 0x19
    STATS = 0x1A
    BLOB_RELEASE = 0x1B
    UNCLAIM_KEY = 0x1C
    TAKE_KEY = 0x1D
    DROP_REQUEST = 0x1E
    ERROR = 0x1F


class ErrorCode(IntEnum):
    TIMEOUT = 1
    MISSING = 2
    CONSUMED = 3
    PROTOCOL = 4


@dataclass(frozen=True)
class Inline:
    data: bytes


@dataclass(frozen=True)
class ShmRef:
    region: str
    offset: int
    length: int


@dataclass(frozen=True)
class TcpRef:
    stream_id: int
    length: int


@dataclass(frozen=True)
class HeapRef:
    handle: int
    length: int


Locator = Union[Inline, ShmRef, TcpRef, HeapRef]

_LOC_TAGS = {Inline: 1, ShmRef: 2, TcpRef: 3, HeapRef: 4}


@dataclass(frozen=True)
class ControlMessage:
    """Lightweight control-plane record; bulk bytes sit behind ``locator``."""

    kind: MessageKind
    request_id: int = 0
    edge: tuple[str, str] = ("", "")
    tag: str = ""
    seq: int = -1
    nbytes: int = 0
    value: int = 0
    locator: Locator | None = None


_HEAD = struct.Struct("<IB")
_MSG_FIXED = struct.Struct("<qQQ")
_U64 = struct.Struct("<Q")
_U32 = struct.Struct("<I")
_U16 = struct.Struct("<H")


def pack_str(s: str) -> bytes:
    raw = s.encode()
    if len(raw) > 0xFFFF:
        raise ValueError("string too long for wire encoding")
    return _U16.pack(len(raw)) + raw


def unpack_str(buf: memoryview | bytes, pos: int) -> tuple[str, int]:
    (n,) = _U16.unpack_from(buf, pos)
    pos += 2
    if pos + n > len(buf):
        raise ValueError("truncated string")
    return bytes(buf[pos:pos + n]).decode(), pos + n


def _encode_locator(loc: Locator | None) -> bytes:
    if loc is None:
        return b"\x00"
    tag = bytes((_LOC_TAGS[type(loc)],))
    if isinstance(loc, Inline):
        return tag + _U32.pack(len(loc.data)) + loc.data
    if isinstance(loc, ShmRef):
        return tag + pack_str(loc.region) + _U64.pack(loc.offset) + _U64.pack(loc.length)
    if isinstance(loc, TcpRef):
        return tag + _U64.pack(loc.stream_id) + _U64.pack(loc.length)
    return tag + _U64.pack(loc.handle) + _U64.pack(loc.length)


def _decode_locator(buf: memoryview | bytes, pos: int) -> tuple[Locator | None, int]:
    tag = buf[pos]
    pos += 1
    if tag == 0:
        return None, pos
    if tag == 1:
        (n,) = _U32.unpack_from(buf, pos)
        pos += 4
        if pos + n > len(buf):
            raise ValueError("truncated inline payload")
        return Inline(bytes(buf[pos:pos + n])), pos + n
    if tag == 2:
        region, pos = unpack_str(buf, pos)
        off, length = struct.unpack_from("<QQ", buf, pos)
        return ShmRef(region, off, length), pos + 16
    if tag == 3:
        sid, length = struct.unpack_from("<QQ", buf, pos)
        return TcpRef(sid, length), pos + 16
    if tag == 4:
        handle, length = struct.unpack_from("<QQ", buf, pos)
        return HeapRef(handle, length), pos + 16
    raise ValueError(f"unknown locator tag {tag}")


def encode_body(msg: ControlMessage) -> bytes:
    return b"".join(
        (
            _U64.pack(msg.request_id),
            pack_str(msg.edge[0]),
            pack_str(msg.edge[1]),
            pack_str(msg.tag),
            _MSG_FIXED.pack(msg.seq, msg.nbytes, msg.value),
            _encode_locator(msg.locator),
        )
    )


def decode_body(kind: int, buf: memoryview | bytes, pos: int = 0) -> tuple[ControlMessage, int]:
    (rid,) = _U64.unpack_from(buf, pos)
    pos += 8
    src, pos = unpack_str(buf, pos)
    dst, pos = unpack_str(buf, pos)
    tag, pos = unpack_str(buf, pos)
    seq, nbytes, value = _MSG_FIXED.unpack_from(buf, pos)
    pos += _MSG_FIXED.size
    loc, pos = _decode_locator(buf, pos)
    return ControlMessage(MessageKind(kind), rid, (src, dst), tag, seq, nbytes, value, loc), pos


def frame(tag: int, body: bytes = b"") -> bytes:
    return _HEAD.pack(len(body) + 1, tag) + body


def encode_message(msg: ControlMessage) -> bytes:
    """Full frame (length prefix, kind tag, body) for one control message."""
    return frame(int(msg.kind), encode_body(msg))


def decode_message(data: bytes | memoryview) -> ControlMessage:
    msg, end = decode_message_prefix(data, 0)
    if end != len(data):
        raise ValueError("trailing bytes after control message frame")
    return msg


def decode_message_prefix(data: bytes | memoryview, pos: int) -> tuple[ControlMessage, int]:
    length, tag = _HEAD.unpack_from(data, pos)
    end = pos + 4 + length
    if end > len(data):
        raise ValueError("truncated frame")
    if tag > max(MessageKind):
        raise ValueError(f"tag {tag} is not a control message")
    msg, used = decode_body(tag, data, pos + 5)
    if used != end:
        raise ValueError("frame length does not match message body")
    return msg, end


def recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    got = 0
    while got < n:
        part = sock.recv(min(n - got, 1 << 20))
        if not part:
            raise EOFError("peer closed connection")
        chunks.append(part)
        got += len(part)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    length, tag = _HEAD.unpack(recv_exact(sock, 5))
    body = recv_exact(sock, length - 1) if length > 1 else b""
    return tag, body


def write_frame(sock: socket.socket, tag: int, body: bytes = b"") -> None:
    head = _HEAD.pack(len(body) + 1, tag)
    if len(body) < 65536:
        sock.sendall(head + body)
    else:
        sock.sendall(head)
        sock.sendall(body)
