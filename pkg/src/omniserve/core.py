"""Domain types shared across the serving stack.

Stage graphs, requests, payloads and the per-request context store live
here, together with graph validation and deterministic topological order.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from math import prod
from typing import Any, Callable, Iterable, Iterator

import numpy as np

StageId = str

TOKEN_MIN = 1
TOKEN_MAX = 255


class OmniError(Exception):
    """Base class for all errors raised by omniserve."""


class WriteConflict(OmniError):
    pass


class MissingKey(OmniError, KeyError):
    def __str__(self) -> str:  # KeyError quotes its argument otherwise
        return Exception.__str__(self)


class InvalidTransition(OmniError):
    pass


class GraphInvalid(OmniError):
    def __init__(self, violations: list["Violation"]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


class StageKind(str, Enum):
    AR = "AR"
    DIFFUSION = "DIFFUSION"


class EdgeMode(str, Enum):
    FULL = "FULL"
    STREAMING = "STREAMING"


class TransportKind(str, Enum):
    INPROC = "INPROC"
    SHM = "SHM"
    TCP = "TCP"


class Status(str, Enum):
    QUEUED = "QUEUED"
    RUNNING = "RUNNING"
    STREAMING = "STREAMING"
    DONE = "DONE"
    FAILED = "FAILED"


# FAILED is reachable from every non-terminal state so that requests aborted
# while still queued (shutdown, rejection downstream) terminate cleanly.
_TRANSITIONS: dict[Status, frozenset[Status]] = {
    Status.QUEUED: frozenset({Status.RUNNING, Status.FAILED}),
    Status.RUNNING: frozenset({Status.STREAMING, Status.DONE, Status.FAILED}),
    Status.STREAMING: frozenset({Status.DONE, Status.FAILED}),
    Status.DONE: frozenset(),
    Status.FAILED: frozenset(),
}


def transition_allowed(src: Status, dst: Status) -> bool:
    return dst in _TRANSITIONS[src]


class DType(IntEnum):
    U8 = 0
    I32 = 1
    FIX16 = 2

    @property
    def width(self) -> int:
        return _WIDTHS[self]

    @property
    def numpy(self) -> np.dtype:
        return _NP_DTYPES[self]


_WIDTHS = {DType.U8: 1, DType.I32: 4, DType.FIX16: 2}
_NP_DTYPES = {
    DType.U8: np.dtype("<u1"),
    DType.I32: np.dtype("<i4"),
    DType.FIX16: np.dtype("<i2"),
}

_DIM = struct.Struct("<I")


@dataclass(frozen=True)
class Payload:
    """Typed, flat little-endian buffer passed between stages."""

    dtype: DType
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        object.__setattr__(self, "dtype", DType(self.dtype))
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        if any(d < 0 for d in self.shape):
            raise ValueError(f"negative dimension in shape {self.shape}")
        if len(self.shape) > 255:
            raise ValueError("rank must fit in one byte")
        expected = prod(self.shape) * self.dtype.width
        if len(self.data) != expected:
            raise ValueError(
                f"payload holds {len(self.data)} bytes, shape {self.shape} "
                f"of {self.dtype.name} needs {expected}"
            )

    @classmethod
    def from_values(
        cls,
        dtype: DType,
        values: Iterable[int] | np.ndarray,
        shape: tuple[int, ...] | None = None,
    ) -> "Payload":
        dtype = DType(dtype)
        raw = np.asarray(list(values) if not isinstance(values, np.ndarray) else values)
        info = np.iinfo(dtype.numpy)
        if raw.size and (raw.min() < info.min or raw.max() > info.max):
            raise ValueError(f"values out of range for {dtype.name}")
        arr = raw.astype(dtype.numpy)
        if shape is None:
            shape = arr.shape if arr.ndim else (arr.size,)
        return cls(dtype, tuple(shape), arr.tobytes())

    @classmethod
    def empty(cls, dtype: DType = DType.U8, width: int | None = None) -> "Payload":
        shape = (0,) if width is None or width == 1 else (0, width)
        return cls(dtype, shape, b"")

    @property
    def nbytes(self) -> int:
        return len(self.data)

    def array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=self.dtype.numpy).reshape(self.shape)

    def values(self) -> list[int]:
        return np.frombuffer(self.data, dtype=self.dtype.numpy).tolist()

    def rows(self) -> list[tuple[int, ...]]:
        arr = self.array()
        if arr.ndim == 1:
            return [(v,) for v in arr.tolist()]
        return [tuple(r) for r in arr.reshape(arr.shape[0], -1).tolist()]

    def to_bytes(self) -> bytes:
        head = bytes((int(self.dtype), len(self.shape)))
        dims = b"".join(_DIM.pack(d) for d in self.shape)
        return head + dims + self.data

    @classmethod
    def from_bytes(cls, buf: bytes | memoryview) -> "Payload":
        payload, used = cls.decode_prefix(buf)
        if used != len(buf):
            raise ValueError(f"{len(buf) - used} trailing bytes after payload")
        return payload

    @classmethod
    def decode_prefix(cls, buf: bytes | memoryview, offset: int = 0) -> tuple["Payload", int]:
        """Decode one payload starting at ``offset``; return it and the end offset."""
        if len(buf) - offset < 2:
            raise ValueError("truncated payload header")
        tag, rank = buf[offset], buf[offset + 1]
        try:
            dtype = DType(tag)
        except ValueError:
            raise ValueError(f"unknown dtype tag {tag}") from None
        pos = offset + 2
        if len(buf) - pos < 4 * rank:
            raise ValueError("truncated payload dims")
        shape = tuple(_DIM.unpack_from(buf, pos + 4 * i)[0] for i in range(rank))
        pos += 4 * rank
        n = prod(shape) * dtype.width
        if len(buf) - pos < n:
            raise ValueError("truncated payload body")
        return cls(dtype, shape, bytes(buf[pos:pos + n])), pos + n


@dataclass(frozen=True)
class HiddenState:
    """Eight fixed-point components with numerators in [0, 15] (denominator 15)."""

    values: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.values) != 8:
            raise ValueError("hidden state has exactly 8 components")
        if any(not 0 <= v <= 15 for v in self.values):
            raise ValueError("hidden state components must lie in [0, 15]")

    @classmethod
    def from_state(cls, h: int) -> "HiddenState":
        return cls(tuple((h >> (4 * k)) & 15 for k in range(8)))

    def as_fractions(self) -> tuple[float, ...]:
        return tuple(v / 15 for v in self.values)


@dataclass(frozen=True)
class Request:
    request_id: int
    prompt_tokens: tuple[int, ...]
    seed: int = 0
    stream: bool = False
    submitted_at: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt_tokens", tuple(self.prompt_tokens))
        if not 0 <= self.request_id < 2**64:
            raise ValueError("request_id must be an unsigned 64-bit integer")
        if not self.prompt_tokens:
            raise ValueError("prompt_tokens must be non-empty")
        if any(not TOKEN_MIN <= t <= TOKEN_MAX for t in self.prompt_tokens):
            raise ValueError(f"prompt tokens must lie in [{TOKEN_MIN}, {TOKEN_MAX}]")
        if not 0 <= self.seed < 2**32:
            raise ValueError("seed must be an unsigned 32-bit integer")


@dataclass(frozen=True)
class StreamChunk:
    request_id: int
    edge: tuple[StageId, StageId]
    seq: int
    payload: Payload
    eos: bool = False


def stream_key(tag: str, seq: int) -> str:
    return f"{tag}#{seq}"


def stream_eos_key(tag: str) -> str:
    return f"{tag}#eos"


@dataclass
class RequestContext:
    """Per-request store of intermediate artifacts, write-once per key."""

    request_id: int
    store: dict[str, Payload] = field(default_factory=dict)
    current_stage: StageId = ""
    status: Status = Status.QUEUED
    _rows: dict[str, tuple[int, list[tuple[int, ...]]]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def put(self, key: str, p: Payload) -> "RequestContext":
        if not key:
            raise ValueError("context key must be non-empty")
        old = self.store.get(key)
        if old is not None:
            if old != p:
                raise WriteConflict(f"request {self.request_id}: key {key!r} already written")
            return self
        self.store[key] = p
        return self

    def get(self, key: str) -> Payload:
        try:
            return self.store[key]
        except KeyError:
            raise MissingKey(f"request {self.request_id}: no key {key!r}") from None

    def __contains__(self, key: str) -> bool:
        return key in self.store

    def transition(self, status: Status) -> None:
        if status == self.status:
            return
        if not transition_allowed(self.status, status):
            raise InvalidTransition(f"{self.status.value} -> {status.value}")
        self.status = status

    def stream_rows(self, tag: str) -> tuple[list[tuple[int, ...]], bool]:
        """Rows of every contiguous chunk stored under ``tag`` plus whether it ended."""
        n, rows = self._rows.get(tag, (0, []))
        while (p := self.store.get(stream_key(tag, n))) is not None:
            rows = rows + p.rows()
            n += 1
        self._rows[tag] = (n, rows)
        return rows, stream_eos_key(tag) in self.store

    # wire format: u64 id, u8 status, str stage, u32 count, (str key, u32 len, payload)*
    def to_bytes(self) -> bytes:
        out = [struct.pack("<QB", self.request_id, _STATUS_CODES[self.status])]
        out.append(_pack_str(self.current_stage))
        out.append(struct.pack("<I", len(self.store)))
        for key in sorted(self.store):
            blob = self.store[key].to_bytes()
            out.append(_pack_str(key))
            out.append(struct.pack("<I", len(blob)))
            out.append(blob)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "RequestContext":
        rid, code = struct.unpack_from("<QB", buf, 0)
        stage, pos = _unpack_str(buf, 9)
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        store: dict[str, Payload] = {}
        for _ in range(count):
            key, pos = _unpack_str(buf, pos)
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            store[key] = Payload.from_bytes(buf[pos:pos + n])
            pos += n
        if pos != len(buf):
            raise ValueError("trailing bytes after request context")
        return cls(rid, store, stage, _STATUS_BY_CODE[code])


_STATUS_CODES = {s: i for i, s in enumerate(Status)}
_STATUS_BY_CODE = {i: s for s, i in _STATUS_CODES.items()}


def _pack_str(s: str) -> bytes:
    raw = s.encode()
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(buf: bytes | memoryview, pos: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    return bytes(buf[pos:pos + n]).decode(), pos + n


def ctx_put(ctx: RequestContext, key: str, p: Payload) -> RequestContext:
    return ctx.put(key, p)


def ctx_get(ctx: RequestContext, key: str) -> Payload:
    return ctx.get(key)


# --------------------------------------------------------------------------
# stage graph


@dataclass(frozen=True)
class StageNode:
    id: StageId
    kind: StageKind
    engine_config_ref: str
    forward_ref: str
    preprocess_ref: str | None = None


@dataclass(frozen=True)
class TransferEdge:
    src: StageId
    dst: StageId
    transfer_ref: str
    mode: EdgeMode = EdgeMode.FULL
    transport: TransportKind = TransportKind.INPROC
    streaming_chunk_size: int | None = None

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"

    @property
    def pair(self) -> tuple[StageId, StageId]:
        return (self.src, self.dst)


@dataclass(frozen=True)
class StageGraph:
    nodes: tuple[StageNode, ...]
    edges: tuple[TransferEdge, ...]
    entry: StageId
    exits: tuple[StageId, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "exits", tuple(self.exits))

    def node(self, stage: StageId) -> StageNode:
        for n in self.nodes:
            if n.id == stage:
                return n
        raise KeyError(stage)

    @property
    def node_ids(self) -> list[StageId]:
        return [n.id for n in self.nodes]

    def out_edges(self, stage: StageId) -> list[TransferEdge]:
        return sorted((e for e in self.edges if e.src == stage), key=lambda e: e.dst)

    def in_edges(self, stage: StageId) -> list[TransferEdge]:
        return sorted((e for e in self.edges if e.dst == stage), key=lambda e: e.src)

    def edge(self, src: StageId, dst: StageId) -> TransferEdge:
        for e in self.edges:
            if e.src == src and e.dst == dst:
                return e
        raise KeyError(f"{src}->{dst}")


@dataclass(frozen=True, order=True)
class Violation:
    kind: str
    subject: str
    detail: str = ""

    def __str__(self) -> str:
        text = f"{self.kind}{{{self.subject}}}"
        return f"{text}: {self.detail}" if self.detail else text


class Registry:
    """Name -> callable tables for forward, preprocess and transfer functions."""

    def __init__(self) -> None:
        self.forwards: dict[str, Any] = {}
        self.preprocesses: dict[str, Callable] = {}
        self.transfers: dict[str, Callable] = {}

    def _register(self, table: dict, name: str, obj: Any = None):
        def deco(fn):
            table[name] = fn
            return fn

        return deco(obj) if obj is not None else deco

    def forward(self, name: str, obj: Any = None):
        return self._register(self.forwards, name, obj)

    def preprocess(self, name: str, obj: Any = None):
        return self._register(self.preprocesses, name, obj)

    def transfer(self, name: str, obj: Any = None):
        return self._register(self.transfers, name, obj)


DEFAULT_REGISTRY = Registry()


def default_registry() -> Registry:
    from . import reference  # noqa: F401  (registers the reference pipeline)

    return DEFAULT_REGISTRY


def _find_cycles(ids: list[StageId], succ: dict[StageId, list[StageId]]) -> list[list[StageId]]:
    """Strongly connected components that contain a cycle (Tarjan)."""
    index: dict[StageId, int] = {}
    low: dict[StageId, int] = {}
    stack: list[StageId] = []
    on_stack: set[StageId] = set()
    comps: list[list[StageId]] = []
    counter = 0

    def visit(v: StageId) -> None:
        nonlocal counter
        index[v] = low[v] = counter
        counter += 1
        stack.append(v)
        on_stack.add(v)
        for w in succ.get(v, []):
            if w not in index:
                visit(w)
                low[v] = min(low[v], low[w])
            elif w in on_stack:
                low[v] = min(low[v], index[w])
        if low[v] == index[v]:
            comp = []
            while True:
                w = stack.pop()
                on_stack.discard(w)
                comp.append(w)
                if w == v:
                    break
            if len(comp) > 1 or v in succ.get(v, []):
                comps.append(sorted(comp))

    for v in sorted(ids):
        if v not in index:
            visit(v)
    return sorted(comps)


def validate_graph(g: StageGraph, registry: Registry | None = None) -> list[Violation]:
    """Return every violation in ``g``, sorted by (kind, subject).

    Function references are only checked when a registry is supplied.
    """
    out: list[Violation] = []
    ids = [n.id for n in g.nodes]
    id_set = set(ids)

    seen: set[StageId] = set()
    for n in g.nodes:
        if not n.id:
            out.append(Violation("InvalidNode", "", "empty stage id"))
        elif n.id in seen:
            out.append(Violation("DuplicateNode", n.id))
        seen.add(n.id)
        if n.kind == StageKind.DIFFUSION and n.preprocess_ref:
            out.append(Violation("InvalidNode", n.id, "diffusion stages take no preprocess"))
        if registry is not None:
            if n.forward_ref not in registry.forwards:
                out.append(Violation("DanglingRef", n.id, f"forward {n.forward_ref!r}"))
            if n.preprocess_ref and n.preprocess_ref not in registry.preprocesses:
                out.append(Violation("DanglingRef", n.id, f"preprocess {n.preprocess_ref!r}"))

    pairs: set[tuple[StageId, StageId]] = set()
    succ: dict[StageId, list[StageId]] = {i: [] for i in ids}
    indeg: dict[StageId, int] = {i: 0 for i in ids}
    for e in g.edges:
        if e.pair in pairs:
            out.append(Violation("DuplicateEdge", e.name))
            continue
        pairs.add(e.pair)
        if e.src == e.dst:
            out.append(Violation("CycleDetected", e.src, "self loop"))
            continue
        missing = [s for s in (e.src, e.dst) if s not in id_set]
        if missing:
            out.append(Violation("DanglingEdge", e.name, f"unknown stage {missing[0]!r}"))
            continue
        succ[e.src].append(e.dst)
        indeg[e.dst] += 1
        if e.mode == EdgeMode.STREAMING and not (e.streaming_chunk_size or 0) >= 1:
            out.append(Violation("InvalidEdge", e.name, "streaming edge needs chunk size >= 1"))
        if e.mode == EdgeMode.FULL and e.streaming_chunk_size is not None:
            out.append(Violation("InvalidEdge", e.name, "chunk size only applies to streaming edges"))
        if registry is not None and e.transfer_ref not in registry.transfers:
            out.append(Violation("DanglingRef", e.name, f"transfer {e.transfer_ref!r}"))

    in_cycle: set[StageId] = set()
    for comp in _find_cycles(ids, succ):
        out.append(Violation("CycleDetected", ",".join(comp)))
        in_cycle.update(comp)

    if g.entry not in id_set:
        out.append(Violation("BadEntry", g.entry, "entry is not a stage"))
    elif indeg[g.entry] != 0 and g.entry not in in_cycle:
        # an entry inside a cycle is already reported by CycleDetected
        out.append(Violation("BadEntry", g.entry, "entry has incoming edges"))
    if not g.exits:
        out.append(Violation("BadExit", "", "no exit stages"))
    for x in g.exits:
        if x not in id_set:
            out.append(Violation("BadExit", x, "exit is not a stage"))

    if g.entry in id_set:
        reach = {g.entry}
        frontier = [g.entry]
        while frontier:
            v = frontier.pop()
            for w in succ[v]:
                if w not in reach:
                    reach.add(w)
                    frontier.append(w)
        for i in ids:
            if i not in reach:
                out.append(Violation("Unreachable", i))
    return sorted(set(out))


def topo_order(g: StageGraph) -> list[StageId]:
    """Kahn's algorithm with a min-heap: lexicographically smallest valid order."""
    violations = validate_graph(g)
    if violations:
        raise GraphInvalid(violations)
    indeg = {n.id: 0 for n in g.nodes}
    succ: dict[StageId, list[StageId]] = {n.id: [] for n in g.nodes}
    for e in g.edges:
        indeg[e.dst] += 1
        succ[e.src].append(e.dst)
    heap = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    return order


def iter_edges(g: StageGraph) -> Iterator[TransferEdge]:
    yield from sorted(g.edges, key=lambda e: (e.src, e.dst))


@dataclass
class Submission:
    """What a transfer function hands to the downstream stage.

    AR stages take ``prompt`` (plus the context tag under which inbound
    stream chunks are stored); diffusion stages take explicit ``jobs`` on
    FULL edges, or turn every inbound chunk into a job on STREAMING edges.
    ``params`` must stay JSON-serializable: it travels in the handoff.
    """

    prompt: tuple[int, ...] | None = None
    stream_tag: str | None = None
    jobs: tuple[Payload, ...] = ()
    params: dict[str, Any] = field(default_factory=dict)
