"""In-process control plane plus the heap and shared-memory data planes."""

from __future__ import annotations

import bisect
import itertools
import threading
import time
from collections import deque
from dataclasses import dataclass
from enum import IntEnum
from multiprocessing import shared_memory

from .errors import ConnectorTimeout, KeyConsumed, RegionFull
from .wire import ControlMessage, HeapRef, ShmRef


class Claim(IntEnum):
    NEW = 0
    SAME = 1
    CONFLICT = 2


@dataclass
class _KeyEntry:
    request_id: int
    digest: bytes
    msg: ControlMessage | None = None
    consumed: bool = False


class KeyTable:
    """Write-once key index shared by the local plane and the TCP broker."""

    def __init__(self, cond: threading.Condition):
        self._cond = cond
        self._keys: dict[str, _KeyEntry] = {}

    def claim(self, key: str, request_id: int, digest: bytes) -> Claim:
        with self._cond:
            entry = self._keys.get(key)
            if entry is None:
                self._keys[key] = _KeyEntry(request_id, digest)
                return Claim.NEW
            return Claim.SAME if entry.digest == digest else Claim.CONFLICT

    def unclaim(self, key: str) -> None:
        with self._cond:
            entry = self._keys.get(key)
            if entry is not None and entry.msg is None:
                del self._keys[key]

    def publish(self, key: str, msg: ControlMessage) -> None:
        with self._cond:
            self._keys[key].msg = msg
            self._cond.notify_all()

    def wait(self, key: str, timeout: float | None, take: bool) -> ControlMessage:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                entry = self._keys.get(key)
                if entry is not None and entry.msg is not None:
                    if entry.consumed:
                        raise KeyConsumed(f"{key} was already consumed")
                    if take:
                        entry.consumed = True
                    return entry.msg
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise ConnectorTimeout(f"timed out waiting for {key}")
                self._cond.wait(remaining)

    def drop_request(self, request_id: int) -> list[ControlMessage]:
        with self._cond:
            gone = [k for k, e in self._keys.items() if e.request_id == request_id]
            out = []
            for k in gone:
                entry = self._keys.pop(k)
                if entry.msg is not None and not entry.consumed:
                    out.append(entry.msg)
            return out


class ChannelTable:
    """Append-only channels with take-all (single consumer) semantics."""

    def __init__(self, cond: threading.Condition):
        self._cond = cond
        self._channels: dict[str, deque[ControlMessage]] = {}

    def append(self, channel: str, msg: ControlMessage) -> int:
        with self._cond:
            q = self._channels.setdefault(channel, deque())
            q.append(msg)
            self._cond.notify_all()
            return len(q)

    def take(self, channel: str, timeout: float = 0.0) -> list[ControlMessage]:
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                q = self._channels.get(channel)
                if q:
                    out = list(q)
                    q.clear()
                    return out
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return []
                self._cond.wait(remaining)

    def drop_request(self, request_id: int) -> list[ControlMessage]:
        with self._cond:
            dropped = []
            for name, q in self._channels.items():
                keep = deque()
                for m in q:
                    (dropped if m.request_id == request_id else keep).append(m)
                self._channels[name] = keep
            return dropped


class LocalControlPlane:
    """Inline control queues for stages hosted in the same process."""

    def __init__(self) -> None:
        cond = threading.Condition()
        self.channels = ChannelTable(cond)
        self.keys = KeyTable(cond)

    def append(self, channel: str, msg: ControlMessage) -> None:
        self.channels.append(channel, msg)

    def take(self, channel: str, timeout: float = 0.0) -> list[ControlMessage]:
        return self.channels.take(channel, timeout)

    def claim_key(self, key: str, request_id: int, digest: bytes) -> Claim:
        return self.keys.claim(key, request_id, digest)

    def unclaim_key(self, key: str) -> None:
        self.keys.unclaim(key)

    def publish_key(self, key: str, msg: ControlMessage) -> None:
        self.keys.publish(key, msg)

    def wait_key(self, key: str, timeout: float | None, take: bool = False) -> ControlMessage:
        return self.keys.wait(key, timeout, take)

    def drop_request(self, request_id: int) -> list[ControlMessage]:
        return self.channels.drop_request(request_id) + self.keys.drop_request(request_id)

    def close(self) -> None:
        pass


class HeapDataPlane:
    """Process-local object store used by INPROC edges for large payloads."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._blobs: dict[int, tuple[int, bytes]] = {}
        self._ids = itertools.count(1)

    def write(self, request_id: int, data: bytes) -> HeapRef:
        with self._lock:
            handle = next(self._ids)
            self._blobs[handle] = (request_id, bytes(data))
        return HeapRef(handle, len(data))

    def read(self, ref: HeapRef) -> bytes:
        with self._lock:
            return self._blobs[ref.handle][1]

    def take(self, ref: HeapRef) -> bytes:
        with self._lock:
            return self._blobs.pop(ref.handle)[1]

    def release(self, ref: HeapRef) -> int:
        with self._lock:
            item = self._blobs.pop(ref.handle, None)
        return len(item[1]) if item else 0

    def release_request(self, request_id: int) -> int:
        with self._lock:
            gone = [h for h, (rid, _) in self._blobs.items() if rid == request_id]
            return sum(len(self._blobs.pop(h)[1]) for h in gone)

    @property
    def allocated_bytes(self) -> int:
        with self._lock:
            return sum(len(b) for _, b in self._blobs.values())

    def close(self) -> None:
        with self._lock:
            self._blobs.clear()


class ExtentAllocator:
    """Bump allocation with a coalescing first-fit free list."""

    def __init__(self, size: int):
        self.size = size
        self.top = 0
        self._free: list[tuple[int, int]] = []  # (offset, length), sorted, coalesced
        self._owned: dict[int, tuple[int, int]] = {}  # offset -> (request_id, length)

    @property
    def allocated(self) -> int:
        return sum(n for _, n in self._owned.values())

    def alloc(self, request_id: int, n: int) -> int:
        n = max(n, 1)
        for i, (off, length) in enumerate(self._free):
            if length >= n:
                if length == n:
                    del self._free[i]
                else:
                    self._free[i] = (off + n, length - n)
                self._owned[off] = (request_id, n)
                return off
        if self.top + n > self.size:
            raise RegionFull(f"need {n} bytes, {self.size - self.allocated} free of {self.size}")
        off = self.top
        self.top += n
        self._owned[off] = (request_id, n)
        return off

    def free(self, off: int) -> int:
        item = self._owned.pop(off, None)
        if item is None:
            return 0
        n = item[1]
        i = bisect.bisect_left(self._free, (off, 0))
        self._free.insert(i, (off, n))
        # merge with right then left neighbour
        if i + 1 < len(self._free) and off + n == self._free[i + 1][0]:
            self._free[i] = (off, n + self._free[i + 1][1])
            del self._free[i + 1]
        if i > 0 and self._free[i - 1][0] + self._free[i - 1][1] == off:
            self._free[i - 1] = (self._free[i - 1][0], self._free[i - 1][1] + self._free[i][1])
            del self._free[i]
            i -= 1
        start, length = self._free[-1]
        if start + length == self.top:
            self.top = start
            self._free.pop()
        return n

    def free_request(self, request_id: int) -> int:
        offs = [o for o, (rid, _) in self._owned.items() if rid == request_id]
        return sum(self.free(o) for o in offs)


class ShmDataPlane:
    """Fixed shared-memory region; payloads are copied in and out by extent."""

    def __init__(self, name: str, size: int, create: bool = True):
        if size <= 0:
            raise ValueError("shm region size must be positive")
        self.name = name
        self.size = size
        self._lock = threading.Lock()
        self._alloc = ExtentAllocator(size)
        if create:
            try:
                self._shm = shared_memory.SharedMemory(name=name, create=True, size=size)
            except FileExistsError:
                # stale region from a crashed run with the same server id
                stale = shared_memory.SharedMemory(name=name)
                stale.close()
                stale.unlink()
                self._shm = shared_memory.SharedMemory(name=name, create=True, size=size)
        else:
            self._shm = shared_memory.SharedMemory(name=name)
        self._owner = create

    def write(self, request_id: int, data: bytes) -> ShmRef:
        n = len(data)
        with self._lock:
            off = self._alloc.alloc(request_id, n)
            self._shm.buf[off:off + n] = data
        return ShmRef(self.name, off, n)

    def read(self, ref: ShmRef) -> bytes:
        if ref.region != self.name:
            raise ValueError(f"locator for region {ref.region!r}, this is {self.name!r}")
        return bytes(self._shm.buf[ref.offset:ref.offset + ref.length])

    def take(self, ref: ShmRef) -> bytes:
        data = self.read(ref)
        self.release(ref)
        return data

    def release(self, ref: ShmRef) -> int:
        with self._lock:
            return self._alloc.free(ref.offset)

    def release_request(self, request_id: int) -> int:
        with self._lock:
            return self._alloc.free_request(request_id)

    @property
    def allocated_bytes(self) -> int:
        with self._lock:
            return self._alloc.allocated

    @property
    def high_water(self) -> int:
        with self._lock:
            return self._alloc.top

    def close(self) -> None:
        if self._shm is None:
            return
        self._shm.close()
        if self._owner:
            try:
                self._shm.unlink()
            except FileNotFoundError:
                pass
        self._shm = None
