import itertools
import os
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniserve.connector import (
    AlreadyOpen,
    Backpressure,
    Connector,
    ConnectorKey,
    ConnectorTimeout,
    ControlMessage,
    HeapRef,
    Inline,
    KeyConsumed,
    MessageKind,
    PortInUse,
    ProtocolViolation,
    RegionFull,
    ShmRef,
    TcpRef,
    TransportConfig,
    WriteConflict,
)
from omniserve.connector.planes import ExtentAllocator
from omniserve.connector.wire import decode_message, encode_message, frame
from omniserve.core import DType, Payload, TransportKind

EDGE = ("a", "b")
KINDS = [TransportKind.INPROC, TransportKind.SHM, TransportKind.TCP]
_ids = itertools.count()


def make(kind, **kw):
    return Connector({EDGE: TransportConfig(kind, **kw)}, server_id=f"t{os.getpid()}x{next(_ids)}")


@pytest.fixture(params=KINDS, ids=lambda k: k.value)
def conn(request):
    c = make(request.param, shm_region_bytes=8 << 20)
    yield c
    c.close()


def blob(n, salt=0):
    return Payload(DType.U8, (n,), bytes((i * 31 + salt) & 0xFF for i in range(n)))


# -- keys and locators --------------------------------------------------------

names = st.text(alphabet="ab/->:%", min_size=1, max_size=4)


@given(st.tuples(st.integers(0, 3), names, names, names), st.tuples(st.integers(0, 3), names, names, names))
def test_canonical_key_is_injective(a, b):
    ka = ConnectorKey(a[0], (a[1], a[2]), a[3])
    kb = ConnectorKey(b[0], (b[1], b[2]), b[3])
    assert (ka.canonical == kb.canonical) == (ka == kb)


def test_canonical_key_format():
    assert ConnectorKey(7, ("thinker", "talker"), "hidden").canonical == "req:7/edge:thinker->talker/hidden"


def test_small_payload_travels_inline(conn):
    ack = conn.put(ConnectorKey(1, EDGE, "k"), blob(100))
    assert isinstance(ack.locator, Inline)


def test_large_payload_uses_data_plane_locator(conn):
    p = blob(1 << 20)
    ack = conn.put(ConnectorKey(1, EDGE, "k"), p)
    expected = {TransportKind.INPROC: HeapRef, TransportKind.SHM: ShmRef, TransportKind.TCP: TcpRef}
    kind = conn.transport_config(EDGE).kind
    assert isinstance(ack.locator, expected[kind])
    assert conn.get(ConnectorKey(1, EDGE, "k"), timeout=5) == p


def test_threshold_boundary():
    c = make(TransportKind.SHM)
    try:
        assert isinstance(c.put(ConnectorKey(1, EDGE, "x"), blob(4096)).locator, Inline)
        assert isinstance(c.put(ConnectorKey(1, EDGE, "y"), blob(4097)).locator, ShmRef)
    finally:
        c.close()


def test_write_once(conn):
    k = ConnectorKey(1, EDGE, "k")
    conn.put(k, blob(10))
    conn.put(k, blob(10))
    with pytest.raises(WriteConflict):
        conn.put(k, blob(10, salt=1))
    assert conn.get(k, timeout=1) == blob(10)


def test_consuming_get_is_once(conn):
    k = ConnectorKey(1, EDGE, "k")
    conn.put(k, blob(8000))
    assert conn.get(k, timeout=1, consume=False) == blob(8000)
    assert conn.get(k, timeout=1) == blob(8000)
    with pytest.raises(KeyConsumed):
        conn.get(k, timeout=1)


def test_get_rendezvous_and_timeout(conn):
    k = ConnectorKey(1, EDGE, "late")
    t = threading.Timer(0.01, lambda: conn.put(k, blob(50)))
    t.start()
    assert conn.get(k, timeout=1.0) == blob(50)
    t.join()
    with pytest.raises(ConnectorTimeout):
        conn.get(ConnectorKey(1, EDGE, "never"), timeout=0.001)


def test_concurrent_gets_on_distinct_keys(conn):
    keys = [ConnectorKey(i, EDGE, "k") for i in range(2)]
    got = {}

    def reader(k):
        got[k.request_id] = conn.get(k, timeout=2)

    threads = [threading.Thread(target=reader, args=(k,)) for k in keys]
    for th in threads:
        th.start()
    for i, k in enumerate(keys):
        conn.put(k, blob(6000, salt=i))
    for th in threads:
        th.join()
    assert got == {0: blob(6000, 0), 1: blob(6000, 1)}


# -- streams ------------------------------------------------------------------

def test_stream_order_and_eos(conn):
    tx = conn.open_stream(3, EDGE)
    rx = conn.subscribe(3, EDGE)
    for i in range(5):
        tx.send(i, blob(10 + i * 2000, i))
    tx.send(5, Payload.empty(), eos=True)
    seen = [(c.seq, c.eos) for c in rx]
    assert seen == [(0, False), (1, False), (2, False), (3, False), (4, False), (5, True)]


def test_late_subscriber_receives_from_seq_zero(conn):
    tx = conn.open_stream(3, EDGE)
    for i in range(3):
        tx.send(i, blob(5000, i))
    rx = conn.subscribe(3, EDGE)
    assert [c.payload for c in rx.poll()] == [blob(5000, i) for i in range(3)]


def test_duplicate_seq_and_send_after_eos(conn):
    tx = conn.open_stream(3, EDGE)
    tx.send(0, blob(1))
    with pytest.raises(ProtocolViolation):
        tx.send(0, blob(1))
    with pytest.raises(ProtocolViolation):
        tx.send(2, blob(1))
    tx.send(1, blob(1), eos=True)
    with pytest.raises(ProtocolViolation):
        tx.send(2, blob(1))


def test_already_open(conn):
    conn.open_stream(1, EDGE)
    conn.subscribe(1, EDGE)
    with pytest.raises(AlreadyOpen):
        conn.open_stream(1, EDGE)
    with pytest.raises(AlreadyOpen):
        conn.subscribe(1, EDGE)


def test_recv_timeout(conn):
    rx = conn.subscribe(9, EDGE)
    with pytest.raises(ConnectorTimeout):
        rx.recv(timeout=0.01)


def test_high_watermark_backpressure():
    c = make(TransportKind.INPROC, high_watermark=2)
    try:
        tx, rx = c.open_stream(1, EDGE), c.subscribe(1, EDGE)
        tx.send(0, blob(1))
        tx.send(1, blob(1))
        with pytest.raises(Backpressure):
            tx.send(2, blob(1))
        rx.poll()
        tx.send(2, blob(1))
    finally:
        c.close()


def test_handoff_roundtrip(conn):
    conn.handoff(4, EDGE, b"x" * 10000)
    conn.handoff(5, EDGE, b"small")
    assert conn.take_handoffs(EDGE) == [(4, b"x" * 10000), (5, b"small")]
    assert conn.take_handoffs(EDGE) == []


schedules = st.lists(
    st.tuples(st.integers(0, 2), st.sampled_from(["send", "poll"]), st.integers(0, 9000)),
    max_size=60,
)


@settings(max_examples=60, deadline=None)
@given(schedules)
def test_fuzzed_schedules_deliver_exactly_once_in_order(ops):
    for kind in (TransportKind.INPROC, TransportKind.SHM):
        c = make(kind, shm_region_bytes=1 << 20)
        try:
            _check_schedule(c, ops)
        finally:
            c.close()


def _check_schedule(c, ops):
    tx = {r: c.open_stream(r, EDGE) for r in range(3)}
    rx = {r: c.subscribe(r, EDGE) for r in range(3)}
    sent = {r: [] for r in range(3)}
    got = {r: [] for r in range(3)}
    for r, op, n in ops:
        if op == "send" and not tx[r].closed:
            p = blob(n % 200 if n < 6000 else n, salt=len(sent[r]))
            eos = n % 7 == 0
            tx[r].send(len(sent[r]), p, eos)
            sent[r].append((p, eos))
        else:
            got[r] += [(ch.payload, ch.eos) for ch in rx[r].poll()]
    for r in range(3):
        got[r] += [(ch.payload, ch.eos) for ch in rx[r].poll()]
        assert got[r] == sent[r]
        assert [e for _, e in got[r]].count(True) <= 1


# -- cleanup and accounting ---------------------------------------------------

def test_cleanup_unknown_and_idempotent(conn):
    assert conn.cleanup(12345) == 0
    conn.put(ConnectorKey(1, EDGE, "k"), blob(10000))
    assert conn.cleanup(1) == 10000 + 6
    assert conn.cleanup(1) == 0
    assert conn.allocated_bytes() == 0


def test_shm_offsets_reused_after_cleanup():
    c = make(TransportKind.SHM, shm_region_bytes=1 << 20)
    try:
        ch = c.channel(EDGE)

        def run(rid):
            for i in range(5):
                c.put(ConnectorKey(rid, EDGE, f"k{i}"), blob(20000 + i, rid))
            return ch.t.data.high_water

        first = run(1)
        c.cleanup(1)
        assert c.allocated_bytes() == 0
        assert run(2) == first
        c.cleanup(2)
        assert c.allocated_bytes() == 0
    finally:
        c.close()


def test_shm_region_full():
    c = make(TransportKind.SHM, shm_region_bytes=64 << 10)
    try:
        c.put(ConnectorKey(1, EDGE, "a"), blob(40000))
        with pytest.raises(RegionFull):
            c.put(ConnectorKey(1, EDGE, "b"), blob(40000))
        # the failed claim is released so the key can be retried later
        c.cleanup(1)
        c.put(ConnectorKey(1, EDGE, "b"), blob(40000))
    finally:
        c.close()


@given(st.lists(st.tuples(st.booleans(), st.integers(1, 500), st.integers(0, 3)), max_size=80))
def test_extent_allocator_accounting(ops):
    a = ExtentAllocator(4096)
    live: dict[int, int] = {}
    for is_alloc, n, rid in ops:
        if is_alloc:
            try:
                off = a.alloc(rid, n)
            except RegionFull:
                assert a.top + n > a.size
                continue
            assert all(off + n <= o or o + m <= off for o, m in live.items())  # no overlap
            live[off] = n
        elif live:
            off = sorted(live)[n % len(live)]
            assert a.free(off) == live.pop(off)
        assert a.allocated == sum(live.values()) <= a.size
    for off in list(live):
        a.free(off)
    assert a.allocated == 0 and a.top == 0


# -- wire format --------------------------------------------------------------

locators = st.one_of(
    st.none(),
    st.binary(max_size=64).map(Inline),
    st.builds(ShmRef, st.text(max_size=20), st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
    st.builds(TcpRef, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
    st.builds(HeapRef, st.integers(0, 2**64 - 1), st.integers(0, 2**64 - 1)),
)
messages = st.builds(
    ControlMessage,
    st.sampled_from(list(MessageKind)),
    st.integers(0, 2**64 - 1),
    st.tuples(st.text(max_size=10), st.text(max_size=10)),
    st.text(max_size=20),
    st.integers(-(2**63), 2**63 - 1),
    st.integers(0, 2**64 - 1),
    st.integers(0, 2**64 - 1),
    locators,
)


@settings(max_examples=500)
@given(messages)
def test_wire_roundtrip(msg):
    assert decode_message(encode_message(msg)) == msg


@given(messages, st.integers(0, 200))
def test_wire_rejects_truncation(msg, cut):
    raw = encode_message(msg)
    cut = min(cut, len(raw) - 1)
    with pytest.raises(Exception):
        decode_message(raw[:cut])


def test_frame_layout():
    assert frame(3, b"xy") == b"\x03\x00\x00\x00\x03xy"


# -- configuration ------------------------------------------------------------

def test_transport_config_validation():
    with pytest.raises(ValueError):
        TransportConfig(inline_threshold=-1)
    with pytest.raises(ValueError):
        TransportConfig(high_watermark=0)


def test_env_overrides(monkeypatch):
    base = TransportConfig(TransportKind.SHM)
    monkeypatch.setenv("OMNI_SHM_BYTES", "1000")
    monkeypatch.setenv("OMNI_SHM_BYTES__THINKER__TALKER", "2000")
    assert TransportConfig.from_env("thinker->talker", base).shm_region_bytes == 2000
    assert TransportConfig.from_env("talker->vocoder", base).shm_region_bytes == 1000


def test_duplicate_tcp_endpoint_is_port_in_use():
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    cfg = TransportConfig(TransportKind.TCP, tcp_endpoint=f"127.0.0.1:{port}")
    with pytest.raises(PortInUse):
        Connector({("a", "b"): cfg, ("b", "c"): cfg})


def test_port_taken_by_other_process_is_port_in_use():
    import socket

    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    s.listen()
    try:
        cfg = TransportConfig(TransportKind.TCP, tcp_endpoint=f"127.0.0.1:{s.getsockname()[1]}")
        with pytest.raises(PortInUse):
            Connector({EDGE: cfg})
    finally:
        s.close()


def test_tcp_put_get_roundtrip():
    c = make(TransportKind.TCP)
    try:
        assert c.endpoint(EDGE).startswith("127.0.0.1:")
        t0 = time.monotonic()
        c.put(ConnectorKey(1, EDGE, "k"), blob(10000))
        assert c.get(ConnectorKey(1, EDGE, "k")) == blob(10000)
        assert time.monotonic() - t0 < 5
    finally:
        c.close()
