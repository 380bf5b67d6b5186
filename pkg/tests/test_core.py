import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniserve.core import (
    DType,
    EdgeMode,
    GraphInvalid,
    HiddenState,
    InvalidTransition,
    MissingKey,
    Payload,
    Request,
    RequestContext,
    StageGraph,
    StageKind,
    StageNode,
    Status,
    TransferEdge,
    Violation,
    WriteConflict,
    ctx_get,
    ctx_put,
    default_registry,
    topo_order,
    transition_allowed,
    validate_graph,
)


def node(i, kind=StageKind.AR, fwd="thinker_forward", pre=None):
    return StageNode(i, kind, i, fwd, pre)


def edge(a, b, mode=EdgeMode.FULL, size=None, ref="Thinker2Talker"):
    return TransferEdge(a, b, ref, mode, streaming_chunk_size=size)


def graph(ids, pairs, entry="A", exits=None):
    return StageGraph(tuple(node(i) for i in ids), tuple(edge(a, b) for a, b in pairs), entry,
                      tuple(exits or [ids[-1]]))


# -- payloads -----------------------------------------------------------------

payloads = st.sampled_from(list(DType)).flatmap(
    lambda dt: st.lists(st.integers(0, 4), min_size=0, max_size=3).flatmap(
        lambda shape: st.binary(
            min_size=dt.width * _prod(shape), max_size=dt.width * _prod(shape)
        ).map(lambda raw: Payload(dt, tuple(shape), raw))
    )
)


def _prod(shape):
    n = 1
    for d in shape:
        n *= d
    return n


@given(payloads)
def test_payload_roundtrip_is_identity(p):
    assert Payload.from_bytes(p.to_bytes()) == p


def test_payload_wire_layout():
    p = Payload.from_values(DType.I32, [1, -1], (2,))
    assert p.to_bytes() == bytes([1, 1]) + (2).to_bytes(4, "little") + b"\x01\x00\x00\x00\xff\xff\xff\xff"


def test_payload_length_must_match_shape():
    with pytest.raises(ValueError):
        Payload(DType.I32, (2,), b"\x00" * 7)


def test_zero_length_payload_roundtrips():
    p = Payload.empty(DType.U8, 9)
    assert p.shape == (0, 9)
    assert Payload.from_bytes(p.to_bytes()) == p


def test_hidden_state_bounds():
    assert HiddenState.from_state(0xFFFFFFFF).values == (15,) * 8
    with pytest.raises(ValueError):
        HiddenState((16,) + (0,) * 7)
    with pytest.raises(ValueError):
        HiddenState((0,) * 7)


# -- requests and contexts ----------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError):
        Request(1, ())
    with pytest.raises(ValueError):
        Request(1, (0,))
    with pytest.raises(ValueError):
        Request(1, (256,))
    with pytest.raises(ValueError):
        Request(1, (1,), seed=2**32)
    assert Request(1, [1, 2]).prompt_tokens == (1, 2)


def test_ctx_put_get_roundtrip_and_idempotent():
    ctx = RequestContext(7)
    p = Payload.from_values(DType.U8, [1, 2, 3])
    ctx_put(ctx, "thinker_hidden", p)
    ctx_put(ctx, "thinker_hidden", Payload.from_values(DType.U8, [1, 2, 3]))
    assert ctx_get(ctx, "thinker_hidden") == p


def test_ctx_write_conflict_and_missing_key():
    ctx = RequestContext(7)
    ctx.put("k", Payload.from_values(DType.U8, [1]))
    with pytest.raises(WriteConflict):
        ctx.put("k", Payload.from_values(DType.U8, [2]))
    with pytest.raises(MissingKey):
        ctx.get("absent")
    with pytest.raises(ValueError):
        ctx.put("", Payload.from_values(DType.U8, [1]))


def test_ctx_get_after_serialization_is_bit_exact():
    ctx = RequestContext(9, current_stage="talker", status=Status.RUNNING)
    ctx.put("a#0", Payload.from_values(DType.I32, [5, -6]))
    ctx.put("b", Payload.from_values(DType.FIX16, [1, 2, 3, 4], (2, 2)))
    back = RequestContext.from_bytes(ctx.to_bytes())
    assert back.store == ctx.store
    assert (back.request_id, back.current_stage, back.status) == (9, "talker", Status.RUNNING)
    assert back.get("b").data == ctx.get("b").data


@given(st.lists(st.tuples(st.sampled_from("abc"), st.integers(0, 3)), max_size=30))
def test_write_once_under_any_interleaving(ops):
    ctx = RequestContext(1)
    first: dict[str, bytes] = {}
    for key, v in ops:
        p = Payload.from_values(DType.U8, [v])
        try:
            ctx.put(key, p)
            first.setdefault(key, p.data)
        except WriteConflict:
            assert first[key] != p.data
        assert ctx.get(key).data == first[key]


def test_status_machine_is_exactly_the_five_state_relation():
    allowed = {
        (Status.QUEUED, Status.RUNNING), (Status.QUEUED, Status.FAILED),
        (Status.RUNNING, Status.STREAMING), (Status.RUNNING, Status.DONE), (Status.RUNNING, Status.FAILED),
        (Status.STREAMING, Status.DONE), (Status.STREAMING, Status.FAILED),
    }
    for a, b in itertools.product(Status, Status):
        if a == b:
            continue
        assert transition_allowed(a, b) == ((a, b) in allowed)
        ctx = RequestContext(1, status=a)
        if (a, b) in allowed:
            ctx.transition(b)
            assert ctx.status == b
        else:
            with pytest.raises(InvalidTransition):
                ctx.transition(b)


# -- graph validation ---------------------------------------------------------

def test_reference_chain_is_valid():
    reg = default_registry()
    g = StageGraph(
        (node("thinker"), node("talker", fwd="talker_forward", pre="process_input"),
         node("vocoder", StageKind.DIFFUSION, "dit_decode")),
        (edge("thinker", "talker", EdgeMode.STREAMING, 4),
         edge("talker", "vocoder", EdgeMode.STREAMING, 8, "Talker2Vocoder")),
        "thinker", ("vocoder",),
    )
    assert validate_graph(g, reg) == []


def test_two_cycle_reported():
    g = graph(["A", "B"], [("A", "B"), ("B", "A")], exits=["B"])
    kinds = [(v.kind, v.subject) for v in validate_graph(g)]
    assert ("CycleDetected", "A,B") in kinds


def test_disconnected_node_unreachable():
    g = graph(["A", "B", "C"], [("A", "B")], exits=["B"])
    assert validate_graph(g) == [Violation("Unreachable", "C")]


def test_dangling_refs_named():
    reg = default_registry()
    g = StageGraph((StageNode("A", StageKind.AR, "A", "nope"), node("B")),
                   (TransferEdge("A", "B", "missing_fn"),), "A", ("B",))
    vs = validate_graph(g, reg)
    assert {v.kind for v in vs} == {"DanglingRef"}
    assert {v.subject for v in vs} == {"A", "A->B"}


def test_other_violations():
    g = StageGraph((node("A"), node("A"), StageNode("D", StageKind.DIFFUSION, "D", "dit_decode", "process_input")),
                   (edge("A", "Z"), edge("A", "A"), TransferEdge("A", "D", "x", EdgeMode.STREAMING)),
                   "Q", ())
    kinds = {v.kind for v in validate_graph(g)}
    assert {"DuplicateNode", "DanglingEdge", "CycleDetected", "InvalidEdge", "InvalidNode", "BadEntry", "BadExit"} <= kinds


def test_duplicate_edge_and_entry_indegree():
    g = graph(["A", "B"], [("A", "B"), ("A", "B")], exits=["B"])
    assert Violation("DuplicateEdge", "A->B") in validate_graph(g)
    g2 = graph(["A", "B", "C"], [("A", "B"), ("C", "A")], entry="A", exits=["B"])
    kinds = {v.kind for v in validate_graph(g2)}
    assert "BadEntry" in kinds and "Unreachable" in kinds


def test_violations_sorted_by_kind_then_subject():
    g = graph(["A", "B", "C", "D"], [("B", "C"), ("C", "B")], exits=["A"])
    vs = validate_graph(g)
    assert vs == sorted(vs)
    assert [v.kind for v in vs] == ["CycleDetected", "Unreachable", "Unreachable", "Unreachable"]


def test_topo_order_examples():
    assert topo_order(graph(["A", "B", "C"], [("A", "B"), ("B", "C")])) == ["A", "B", "C"]
    assert topo_order(graph(["A"], [])) == ["A"]
    diamond = graph(["A", "B", "C", "D"], [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")])
    assert topo_order(diamond) == ["A", "B", "C", "D"]


def test_diamond_order_is_lexicographically_smallest():
    pairs = [("A", "B"), ("A", "C"), ("B", "D"), ("C", "D")]
    valid = [list(p) for p in itertools.permutations("ABCD")
             if all(p.index(u) < p.index(v) for u, v in pairs)]
    assert min(valid) == topo_order(graph(list("ABCD"), pairs))


def test_topo_order_rejects_invalid():
    with pytest.raises(GraphInvalid):
        topo_order(graph(["A", "B"], [("A", "B"), ("B", "A")], exits=["B"]))


@st.composite
def dags(draw):
    n = draw(st.integers(1, 7))
    ids = [f"s{i}" for i in range(n)]
    perm = draw(st.permutations(ids))
    pairs = set()
    for j in range(1, n):
        pairs.add((perm[draw(st.integers(0, j - 1))], perm[j]))  # keeps everything reachable
    for _ in range(draw(st.integers(0, 6))):
        a, b = sorted(draw(st.tuples(st.integers(0, n - 1), st.integers(0, n - 1))))
        if a != b:
            pairs.add((perm[a], perm[b]))
    return graph(ids, sorted(pairs), entry=perm[0], exits=[perm[-1]])


@settings(max_examples=200)
@given(dags())
def test_topo_order_is_a_permutation_respecting_edges(g):
    assert validate_graph(g) == []
    order = topo_order(g)
    assert sorted(order) == sorted(g.node_ids)
    pos = {s: i for i, s in enumerate(order)}
    assert all(pos[e.src] < pos[e.dst] for e in g.edges)
