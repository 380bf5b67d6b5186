import math
import threading
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omniserve import orchestrator as orch_mod
from omniserve.clock import VirtualClock
from omniserve.config import load_config, reference_plan, shipped_config_path
from omniserve.connector import PortInUse, TransportConfig
from omniserve.core import (
    DType,
    EdgeMode,
    Payload,
    Registry,
    Request,
    RequestContext,
    Submission,
    TransportKind,
    default_registry,
)
from omniserve.orchestrator import (
    ConfigInvalid,
    EngineSpawnFailed,
    Orchestrator,
    Overloaded,
    Rejected,
    decode_handoff,
    encode_handoff,
    run_requests,
)
from omniserve.reference import monolithic_oracle, thinker_generate, vocoder_decode


def copy_registry() -> Registry:
    base = default_registry()
    reg = Registry()
    reg.forwards.update(base.forwards)
    reg.preprocesses.update(base.preprocesses)
    reg.transfers.update(base.transfers)
    return reg


def seeded_requests(n: int, seed: int = 0) -> list[Request]:
    import random

    rng = random.Random(seed)
    out = []
    for i in range(n):
        prompt = tuple(rng.randint(1, 255) for _ in range(rng.randint(1, 40)))
        out.append(Request(i + 1, prompt, seed=rng.getrandbits(32)))
    return out


def same_outputs(out, ref) -> bool:
    return (out.text_tokens, out.codec_tokens, out.waveform) == (ref.text_tokens, ref.codec_tokens, ref.waveform)


# -- start --------------------------------------------------------------


def test_start_reference_plan_reports_all_up():
    with Orchestrator(reference_plan(), clock=VirtualClock()) as orch:
        health = orch.health()
        assert health["state"] == "RUNNING"
        assert set(health["stages"]) == {"thinker", "talker", "vocoder"}
        assert all(s["status"] == "UP" for s in health["stages"].values())
        assert health["stages"]["talker"]["placement"] == "group-1"
    assert all(s["status"] == "DOWN" for s in orch.health()["stages"].values())


def test_missing_engine_config_names_node():
    plan = reference_plan()
    plan = replace(plan, engine_configs={k: v for k, v in plan.engine_configs.items() if k != "talker"})
    with pytest.raises(ConfigInvalid, match="talker"):
        Orchestrator(plan).start()


def test_duplicate_tcp_endpoint_port_in_use():
    plan = reference_plan(transport="TCP")
    fixed = {name: replace(t, tcp_endpoint="127.0.0.1:47811") for name, t in plan.transports.items()}
    with pytest.raises(PortInUse):
        Orchestrator(replace(plan, transports=fixed)).start()


def test_engine_spawn_failure_names_stage(monkeypatch):
    real = orch_mod.DiffusionEngine

    def broken(*a, **kw):
        raise RuntimeError("no device")

    monkeypatch.setattr(orch_mod, "DiffusionEngine", broken)
    with pytest.raises(EngineSpawnFailed) as err:
        Orchestrator(reference_plan()).start()
    assert err.value.stage == "vocoder"
    assert "no device" in str(err.value)
    monkeypatch.setattr(orch_mod, "DiffusionEngine", real)
    Orchestrator(reference_plan()).start().shutdown()


def test_restart_after_clean_shutdown():
    orch = Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock())
    req = Request(1, (1,), seed=0)
    for _ in range(2):
        orch.start()
        out = orch.submit(req).collect()
        assert same_outputs(out, monolithic_oracle(req))
        orch.shutdown()


# -- submit -------------------------------------------------------------


@pytest.mark.parametrize("transport", ["INPROC", "SHM"])
def test_reference_request_equals_oracle(transport):
    req = Request(1, (1,), seed=0)
    outs, _ = run_requests(reference_plan(transport=transport), [req])
    out = outs[0]
    assert out.ok
    assert out.text_tokens == [43, 144, 217]
    assert out.codec_tokens == [23, 24, 25, 26, 37, 38, 39, 40, 49, 50, 51, 52]
    assert len(out.waveform) == 192
    assert same_outputs(out, monolithic_oracle(req))


def test_stream_chunks_arrive_before_done():
    with Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock()) as orch:
        h = orch.submit(Request(1, (9, 9, 9), seed=3, stream=True))
        chunks = list(h.chunks())
        out = h.collect()
    assert out.ok
    waves = [c for c in chunks if c.payload.nbytes]
    assert len(waves) > 1
    assert [c.seq for c in chunks] == list(range(len(chunks)))
    assert b"".join(c.payload.data for c in waves) == Payload.from_values(DType.I32, out.waveform).data
    assert h.chunk_times[0] < out.metrics.done_at


def test_submit_after_shutdown_rejected():
    orch = Orchestrator(reference_plan(), clock=VirtualClock()).start()
    orch.shutdown()
    with pytest.raises(Rejected):
        orch.submit(Request(1, (1,)))


def test_submit_before_start_rejected():
    with pytest.raises(Rejected):
        Orchestrator(reference_plan()).submit(Request(1, (1,)))


def test_admission_cap_overloaded():
    plan = replace(reference_plan(transport="INPROC"), admission_cap=2)
    with Orchestrator(plan, clock=VirtualClock()) as orch:
        orch.submit(Request(1, (1,)))
        orch.submit(Request(2, (2,)))
        with pytest.raises(Overloaded):
            orch.submit(Request(3, (3,)))
        orch.run_until_idle()
        assert orch.submit(Request(3, (3,))).collect().ok


def test_duplicate_request_id_rejected():
    with Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock()) as orch:
        orch.submit(Request(5, (1,)))
        with pytest.raises(Rejected, match="already used"):
            orch.submit(Request(5, (2,)))


def test_entry_too_large_rejected():
    plan = reference_plan(transport="INPROC")
    small = replace(plan.engine_configs["thinker"], kv_budget_tokens=8)
    plan = replace(plan, engine_configs={**plan.engine_configs, "thinker": small})
    with Orchestrator(plan, clock=VirtualClock()) as orch:
        with pytest.raises(Rejected, match="kv budget"):
            orch.submit(Request(1, tuple([1] * 9)))
        assert orch.stats()["submitted"] == 0


# -- transfers ----------------------------------------------------------


def test_full_thinker2talker_prompts_with_text():
    reg = copy_registry()
    seen = {}
    inner = reg.transfers["Thinker2Talker"]

    def spy(ctx, edge, upstream, request):
        sub = inner(ctx, edge, upstream, request)
        seen[request.request_id] = sub.prompt
        return sub

    reg.transfers["Thinker2Talker"] = spy
    reqs = seeded_requests(6, seed=4)
    outs, orch = run_requests(reference_plan(transport="INPROC", mode="FULL"), reqs, registry=reg)
    for req, out in zip(reqs, outs):
        assert seen[req.request_id] == thinker_generate(req.prompt_tokens, req.seed).text_tokens
        assert same_outputs(out, monolithic_oracle(req))
    assert set(orch.transfer_calls.values()) == {1}
    assert len(orch.transfer_calls) == 2 * len(reqs)


@pytest.mark.parametrize("chunk", [1, 3, 8])
def test_talker2vocoder_chunk_count(chunk):
    reg = copy_registry()
    jobs: dict[int, int] = {}
    inner = reg.forwards["dit_decode"]

    class Counting:
        role = inner.role

        def denoise(self, job):
            if job.input.nbytes:
                jobs[job.request_id] = jobs.get(job.request_id, 0) + 1
            return inner.denoise(job)

    reg.forwards["dit_decode"] = Counting()
    reqs = seeded_requests(8, seed=chunk)
    outs, _ = run_requests(reference_plan(transport="INPROC", vocoder_chunk=chunk), reqs, registry=reg)
    for out in outs:
        assert out.ok
        assert jobs[out.request_id] == math.ceil(len(out.codec_tokens) / chunk)


def test_streaming_wiring_once_per_edge():
    reqs = seeded_requests(10, seed=1)
    outs, orch = run_requests(reference_plan(transport="INPROC"), reqs)
    assert all(o.ok for o in outs)
    assert len(orch.wirings) == 2 * len(reqs)
    assert set(orch.wirings.values()) == {1}
    assert set(orch.transfer_calls.values()) == {1}


@pytest.mark.parametrize("mode", ["FULL", "STREAMING"])
def test_transfer_error_fails_request(mode):
    reg = copy_registry()

    def boom(ctx, edge, upstream, request):
        if request.request_id == 2:
            raise ValueError("bad hand-over")
        return default_registry().transfers["Talker2Vocoder"](ctx, edge, upstream, request)

    reg.transfers["Talker2Vocoder"] = boom
    reqs = [Request(1, (1,)), Request(2, (2,)), Request(3, (3,))]
    outs, orch = run_requests(reference_plan(transport="INPROC", mode=mode), reqs, registry=reg)
    bad = outs[1]
    assert bad.status == "FAILED"
    assert bad.failed_stage == "talker"
    assert "talker->vocoder" in bad.error and "bad hand-over" in bad.error
    assert not orch.stages["vocoder"].engine.knows(2)
    assert all(2 not in [rid for rid, _ in b] for b in orch.stages["vocoder"].engine.batch_log)
    assert outs[0].ok and outs[2].ok
    assert orch.stats()["connector_allocated_bytes"] == 0


def test_transfer_must_return_submission():
    reg = copy_registry()
    reg.transfers["Thinker2Talker"] = lambda ctx, edge, up, req: None
    outs, _ = run_requests(reference_plan(transport="INPROC"), [Request(1, (1,))], registry=reg)
    assert outs[0].status == "FAILED"
    assert "not Submission" in outs[0].error


def test_forward_error_attributed_to_stage():
    reg = copy_registry()

    class Broken:
        role = "waveform"

        def denoise(self, job):
            raise RuntimeError("nan")

    reg.forwards["dit_decode"] = Broken()
    outs, _ = run_requests(reference_plan(transport="INPROC"), [Request(1, (1,))], registry=reg)
    assert outs[0].status == "FAILED" and outs[0].failed_stage == "vocoder"


# -- collect and shutdown ----------------------------------------------


def test_collect_is_idempotent():
    with Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock()) as orch:
        h = orch.submit(Request(1, (1,)))
        assert h.collect() is h.collect()


def test_drain_completes_in_flight():
    orch = Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock()).start()
    hs = [orch.submit(Request(i, (i,))) for i in (1, 2)]
    report = orch.shutdown(drain=True)
    assert report.drained == 2 and report.aborted == 0
    assert all(h.done and h.collect().ok for h in hs)
    with pytest.raises(Rejected):
        orch.submit(Request(3, (3,)))


def test_abort_fails_with_shutdown_reason():
    orch = Orchestrator(reference_plan(), clock=VirtualClock()).start()
    hs = [orch.submit(Request(i, (i,))) for i in (1, 2)]
    report = orch.shutdown(drain=False)
    assert report.aborted == 2
    for h in hs:
        out = h.collect()
        assert out.status == "FAILED" and out.error == "shutdown"


def test_double_shutdown_is_noop():
    orch = Orchestrator(reference_plan(), clock=VirtualClock()).start()
    first = orch.shutdown()
    second = orch.shutdown()
    assert not first.already_stopped
    assert second.already_stopped


def test_background_mode_collect_from_threads():
    orch = Orchestrator(reference_plan(transport="INPROC"), clock=VirtualClock(), background=True).start()
    reqs = seeded_requests(8, seed=9)
    results = {}

    def worker(req):
        results[req.request_id] = orch.submit(req).collect(timeout=30)

    threads = [threading.Thread(target=worker, args=(r,)) for r in reqs]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    orch.shutdown()
    for req in reqs:
        assert same_outputs(results[req.request_id], monolithic_oracle(req))


def test_mid_pipeline_abort_frees_connector():
    orch = Orchestrator(reference_plan(transport="SHM"), clock=VirtualClock()).start()
    h = orch.submit(Request(1, tuple(range(1, 60)), seed=11))
    orch.run(max_time=40_000)
    assert not h.done
    orch.shutdown(drain=False)
    assert h.collect().error == "shutdown"
    assert orch.connector.allocated_bytes() == 0


# -- invariants ---------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(0, 2**16),
    st.sampled_from([1, 4, 16]),
    st.sampled_from([1, 8]),
    st.sampled_from(["STREAMING", "FULL"]),
)
def test_count_conservation_and_oracle(n, seed, tc, vc, mode):
    reqs = seeded_requests(n, seed)
    outs, orch = run_requests(reference_plan(transport="INPROC", talker_chunk=tc, vocoder_chunk=vc, mode=mode), reqs)
    stats = orch.stats()
    assert stats["submitted"] == n
    assert stats["done"] + stats.get("failed", 0) == n
    assert sorted(o.request_id for o in outs) == [r.request_id for r in reqs]
    for req, out in zip(reqs, outs):
        assert same_outputs(out, monolithic_oracle(req))
    assert set(orch.transfer_calls.values()) == {1}


def test_determinism_of_outputs_and_schedules():
    reqs = seeded_requests(20, seed=5)

    def once():
        outs, orch = run_requests(reference_plan(transport="INPROC"), reqs)
        logs = {sid: (rt.engine.schedule_log if hasattr(rt.engine, "schedule_log") else rt.engine.batch_log)
                for sid, rt in orch.stages.items()}
        return [(o.outputs(), o.metrics.to_json()) for o in outs], logs

    assert once() == once()


def test_monolithic_sequential_matches_oracle_timeline():
    req = Request(1, (1,), seed=0)
    outs, _ = run_requests(orch_mod.monolithic_plan(reference_plan()), [req], sequential=True)
    assert outs[0].metrics.to_json() == monolithic_oracle(req).metrics.to_json()
    assert outs[0].metrics.done_at == 50_000


def test_handoff_roundtrip():
    from omniserve.core import TransferEdge

    req = Request(7, (1, 2, 3), seed=9, stream=True, submitted_at=12)
    edge = TransferEdge("a", "b", "T", EdgeMode.FULL, TransportKind.INPROC)
    ctx = RequestContext(7, current_stage="a").put("k", Payload.from_values(DType.U8, [1, 2]))
    sub = Submission((4, 5), "tag", (Payload.from_values(DType.I32, [-1, 2]),), {"steps": 3})
    r2, pair, s2, c2 = decode_handoff(encode_handoff(req, edge, sub, ctx))
    assert r2 == req and pair == ("a", "b") and s2 == sub
    assert c2.get("k") == ctx.get("k")


def test_ar_dit_config_runs():
    plan = load_config(shipped_config_path("ar_dit_image.json")).plan
    req = Request(1, (1,), seed=0)
    outs, _ = run_requests(plan, [req])
    out = outs[0]
    assert out.ok and out.text_tokens == [43, 144, 217]
    codes = [t % 64 for t in out.text_tokens]
    assert out.waveform == vocoder_decode(codes, 64, 8)


def test_transport_config_default_used_for_unlisted_edge():
    plan = reference_plan(transport="INPROC")
    plan = replace(plan, transports={})
    assert plan.transport_for(plan.graph.edges[0]) == TransportConfig(kind=TransportKind.INPROC)
    assert run_requests(plan, [Request(1, (1,))])[0][0].ok
