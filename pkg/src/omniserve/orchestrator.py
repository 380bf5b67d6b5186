"""Control plane: one engine per stage, request routing and lifecycle.

A single event loop drives every engine. When an engine becomes idle at
time ``t`` it runs one iteration; the iteration's outputs (stream chunks,
finished sequences) are published at ``t + cost``. Under the virtual clock
the loop jumps straight to the next publish time, which makes whole runs
deterministic; under the wall clock it sleeps until then.

Transfer functions run here, never inside engines. STREAMING edges are
wired (transfer called once, streams opened, handoff sent) as soon as a
request reaches the upstream stage; FULL edges call their transfer when the
upstream stage finishes the request.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import queue
import struct
import threading
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Iterator

from .ar_engine import ArEngine, EngineConfig, IterationResult, RejectedTooLarge
from .clock import Clock, VirtualClock, WallClock
from .connector import Connector, StreamReceiver, StreamSender, TransportConfig
from .connector.errors import ConnectorError, PortInUse
from .core import (
    EdgeMode,
    GraphInvalid,
    OmniError,
    Payload,
    Registry,
    Request,
    RequestContext,
    StageGraph,
    StageId,
    StageKind,
    Status,
    StreamChunk,
    Submission,
    TransferEdge,
    TransportKind,
    default_registry,
    stream_eos_key,
    stream_key,
    topo_order,
    validate_graph,
)
from .diffusion_engine import DiffusionEngine, DiffusionJob, DiffusionResult
from .metrics import FinalOutput, MetricsCollector, MetricsRecord

log = logging.getLogger(__name__)

CLIENT = ""  # pseudo stage receiving exit-stage output


class ConfigInvalid(OmniError):
    pass


class EngineSpawnFailed(OmniError):
    def __init__(self, stage: StageId, reason: str):
        super().__init__(f"engine for stage {stage!r} failed to start: {reason}")
        self.stage = stage


class Overloaded(OmniError):
    pass


class Rejected(OmniError):
    pass


class TransferFnError(OmniError):
    pass


@dataclass
class DeploymentPlan:
    graph: StageGraph
    engine_configs: dict[str, EngineConfig]
    transports: dict[str, TransportConfig] = field(default_factory=dict)
    placement: dict[StageId, str] = field(default_factory=dict)
    admission_cap: int = 1024
    clock: str = "virtual"
    time_scale: float = 1.0
    server_id: str | None = None

    def problems(self, registry: Registry | None = None) -> list[str]:
        out = [str(v) for v in validate_graph(self.graph, registry)]
        for n in self.graph.nodes:
            if n.engine_config_ref not in self.engine_configs:
                out.append(f"MissingEngineConfig{{{n.id}}}: no engine config {n.engine_config_ref!r}")
        names = {e.name for e in self.graph.edges}
        for name in sorted(set(self.transports) - names):
            out.append(f"UnknownTransport{{{name}}}: no such edge")
        for e in self.graph.edges:
            t = self.transports.get(e.name)
            if t is not None and t.kind != e.transport:
                out.append(f"TransportMismatch{{{e.name}}}: edge says {e.transport.value}, transport says {t.kind.value}")
        endpoints: dict[str, str] = {}
        for e in sorted(self.graph.edges, key=lambda e: e.name):
            t = self.transport_for(e)
            if t.kind == TransportKind.TCP and not t.tcp_endpoint.endswith(":0"):
                if t.tcp_endpoint in endpoints:
                    out.append(f"PortInUse{{{e.name}}}: endpoint {t.tcp_endpoint} also used by {endpoints[t.tcp_endpoint]}")
                endpoints[t.tcp_endpoint] = e.name
        if self.admission_cap < 1:
            out.append("InvalidServer{admission_cap}: must be >= 1")
        if self.clock not in ("virtual", "wall"):
            out.append(f"InvalidClock{{{self.clock}}}")
        return out

    def transport_for(self, edge: TransferEdge) -> TransportConfig:
        t = self.transports.get(edge.name)
        return t if t is not None else TransportConfig(kind=edge.transport)

    def engine_for(self, stage: StageId) -> EngineConfig:
        node = self.graph.node(stage)
        return replace(self.engine_configs[node.engine_config_ref], stage=stage)


# --------------------------------------------------------------------------
# handoff encoding: u32 json length | json | u32 job count | (u32 len | payload)* | ctx


def encode_handoff(request: Request, edge: TransferEdge, sub: Submission, ctx: RequestContext) -> bytes:
    meta = {
        "request_id": request.request_id,
        "prompt_tokens": list(request.prompt_tokens),
        "seed": request.seed,
        "stream": request.stream,
        "submitted_at": request.submitted_at,
        "edge": [edge.src, edge.dst],
        "prompt": None if sub.prompt is None else list(sub.prompt),
        "stream_tag": sub.stream_tag,
        "params": sub.params,
    }
    head = json.dumps(meta, sort_keys=True).encode()
    parts = [struct.pack("<I", len(head)), head, struct.pack("<I", len(sub.jobs))]
    for p in sub.jobs:
        blob = p.to_bytes()
        parts += [struct.pack("<I", len(blob)), blob]
    parts.append(ctx.to_bytes())
    return b"".join(parts)


def decode_handoff(blob: bytes) -> tuple[Request, tuple[str, str], Submission, RequestContext]:
    (n,) = struct.unpack_from("<I", blob, 0)
    meta = json.loads(blob[4:4 + n])
    pos = 4 + n
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    jobs = []
    for _ in range(count):
        (m,) = struct.unpack_from("<I", blob, pos)
        jobs.append(Payload.from_bytes(blob[pos + 4:pos + 4 + m]))
        pos += 4 + m
    ctx = RequestContext.from_bytes(blob[pos:])
    req = Request(meta["request_id"], tuple(meta["prompt_tokens"]), meta["seed"], meta["stream"], meta["submitted_at"])
    prompt = None if meta["prompt"] is None else tuple(meta["prompt"])
    sub = Submission(prompt, meta["stream_tag"], tuple(jobs), meta["params"])
    return req, tuple(meta["edge"]), sub, ctx


# --------------------------------------------------------------------------


class ServerState(str, Enum):
    CREATED = "CREATED"
    RUNNING = "RUNNING"
    DRAINING = "DRAINING"
    STOPPED = "STOPPED"


@dataclass
class ShutdownReport:
    drained: int = 0
    aborted: int = 0
    freed_bytes: int = 0
    already_stopped: bool = False


class ResultHandle:
    """Caller-side view of one request; safe to await from any thread."""

    def __init__(self, orch: "Orchestrator", request: Request):
        self._orch = orch
        self.request = request
        self.request_id = request.request_id
        self._done = threading.Event()
        self._result: FinalOutput | None = None
        self._chunks: "queue.Queue[StreamChunk | None]" = queue.Queue()
        self.chunk_times: list[int] = []

    @property
    def done(self) -> bool:
        return self._done.is_set()

    def _push(self, chunk: StreamChunk, t: int) -> None:
        self.chunk_times.append(t)
        self._chunks.put(chunk)

    def _finish(self, out: FinalOutput) -> None:
        self._result = out
        self._chunks.put(None)
        self._done.set()

    def collect(self, timeout: float | None = None) -> FinalOutput:
        """Final output once DONE or FAILED; repeated calls return the same object."""
        if not self._done.is_set():
            if self._orch.background:
                if not self._done.wait(timeout):
                    raise TimeoutError(f"request {self.request_id} still running")
            else:
                self._orch.run(until=self._done.is_set)
        assert self._result is not None
        return self._result

    def chunks(self, timeout: float | None = None) -> Iterator[StreamChunk]:
        """Exit-stage chunks in stream order; ends at eos or failure."""
        while True:
            if not self._orch.background and self._chunks.empty() and not self._done.is_set():
                self._orch.run(until=lambda: not self._chunks.empty() or self._done.is_set())
            item = self._chunks.get(timeout=timeout)
            if item is None:
                return
            yield item
            if item.eos:
                return


@dataclass
class _Flight:
    """Orchestrator-side state of one in-flight request."""

    request: Request
    handle: ResultHandle
    record: MetricsRecord
    ctxs: dict[StageId, RequestContext] = field(default_factory=dict)
    entered: set[StageId] = field(default_factory=set)
    finished: dict[StageId, Payload] = field(default_factory=dict)
    joins: dict[StageId, list[tuple[tuple[str, str], Submission, RequestContext]]] = field(
        default_factory=lambda: defaultdict(list)
    )
    senders: dict[tuple[str, str], StreamSender] = field(default_factory=dict)
    receivers: dict[tuple[str, str], StreamReceiver] = field(default_factory=dict)
    params: dict[StageId, dict[str, Any]] = field(default_factory=dict)
    stream_tags: dict[StageId, str | None] = field(default_factory=dict)
    exits_left: set[StageId] = field(default_factory=set)
    status: Status = Status.QUEUED


class _StageRuntime:
    def __init__(self, node_id: StageId, engine: ArEngine | DiffusionEngine, cfg: EngineConfig):
        self.id = node_id
        self.engine = engine
        self.cfg = cfg
        self.busy_until = 0
        self.busy = False
        self.blocked_epoch = -1
        self.iterations = 0
        self.busy_time = 0

    @property
    def kind(self) -> StageKind:
        return StageKind.AR if isinstance(self.engine, ArEngine) else StageKind.DIFFUSION


class Orchestrator:
    """Starts engines for a plan and routes requests through the stage graph."""

    def __init__(
        self,
        plan: DeploymentPlan,
        registry: Registry | None = None,
        clock: Clock | None = None,
        background: bool = False,
        sequential: bool = False,
        keep_logs: bool = True,
    ):
        self.plan = plan
        self.registry = registry or default_registry()
        self._clock_override = clock
        self.background = background
        self.sequential = sequential
        self.keep_logs = keep_logs
        self.state = ServerState.CREATED
        self._lock = threading.RLock()
        self._wake = threading.Event()
        self._inbox: "queue.Queue[tuple[Request, ResultHandle]]" = queue.Queue()
        self._thread: threading.Thread | None = None
        self._report: ShutdownReport | None = None
        self.connector: Connector | None = None
        self.on_done: list[Callable[[FinalOutput], None]] = []

    # -- lifecycle -----------------------------------------------------
    def start(self) -> "Orchestrator":
        with self._lock:
            if self.state in (ServerState.RUNNING, ServerState.DRAINING):
                return self
            problems = self.plan.problems(self.registry)
            port_clash = [p for p in problems if p.startswith("PortInUse")]
            if port_clash:
                raise PortInUse("; ".join(port_clash))
            if problems:
                raise ConfigInvalid("; ".join(problems))
            self._setup()
            self.state = ServerState.RUNNING
            self._report = None
            if self.background:
                self._thread = threading.Thread(target=self._serve_forever, daemon=True, name="omni-orchestrator")
                self._thread.start()
            log.info("started %d stages: %s", len(self.stages), ", ".join(self.order))
        return self

    def _setup(self) -> None:
        g = self.plan.graph
        self.order = topo_order(g)
        self.clock: Clock = self._clock_override or (
            WallClock(self.plan.time_scale) if self.plan.clock == "wall" else VirtualClock()
        )
        transports = {e.pair: TransportConfig.from_env(e.name, self.plan.transport_for(e)) for e in g.edges}
        self.connector = Connector(transports, server_id=self.plan.server_id)
        self.stages: dict[StageId, _StageRuntime] = {}
        self.roles: dict[str, StageId] = {}
        try:
            for sid in self.order:
                self.stages[sid] = self._spawn(sid)
        except Exception:
            self.connector.close()
            raise
        self._events: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()
        self._epoch = 0
        self._flights: dict[int, _Flight] = {}
        self._queued: list[tuple[Request, ResultHandle]] = []  # sequential mode backlog
        self._seen_ids: set[int] = set()
        self.metrics = MetricsCollector()
        self.transfer_calls: dict[tuple[int, str], int] = defaultdict(int)
        self.wirings: dict[tuple[int, str], int] = defaultdict(int)
        self.counters = defaultdict(int, {"submitted": 0, "done": 0, "failed": 0, "freed_bytes": 0})
        self.results: dict[int, FinalOutput] = {}

    def _spawn(self, sid: StageId) -> _StageRuntime:
        g = self.plan.graph
        node = g.node(sid)
        try:
            cfg = self.plan.engine_for(sid)
            model = self.registry.forwards[node.forward_ref]
            streaming = [e for e in g.out_edges(sid) if e.mode == EdgeMode.STREAMING]
            client = (
                TransferEdge(sid, CLIENT, "client", EdgeMode.STREAMING, TransportKind.INPROC, 1)
                if sid in g.exits
                else None
            )
            if node.kind == StageKind.AR:
                pre = self.registry.preprocesses[node.preprocess_ref] if node.preprocess_ref else None
                engine: ArEngine | DiffusionEngine = ArEngine(
                    cfg, model, pre, streaming, drain=lambda rid, s=sid: self._drain(s, rid),
                    client_edge=client, keep_log=self.keep_logs,
                )
            else:
                engine = DiffusionEngine(cfg, model, streaming, client_edge=client)
        except Exception as exc:
            raise EngineSpawnFailed(sid, f"{type(exc).__name__}: {exc}") from exc
        role = getattr(model, "role", None)
        if role and role not in self.roles:
            self.roles[role] = sid
        return _StageRuntime(sid, engine, cfg)

    def health(self) -> dict[str, Any]:
        up = self.state in (ServerState.RUNNING, ServerState.DRAINING)
        stages = {}
        for sid in getattr(self, "order", []):
            rt = self.stages[sid]
            stages[sid] = {
                "status": "UP" if up else "DOWN",
                "kind": rt.kind.value,
                "placement": self.plan.placement.get(sid, "default"),
                "busy": rt.busy,
                "iterations": rt.iterations,
            }
        return {"state": self.state.value, "stages": stages}

    def stats(self) -> dict[str, Any]:
        with self._lock:
            return {
                "state": self.state.value,
                "in_flight": len(getattr(self, "_flights", {})),
                **{k: v for k, v in sorted(getattr(self, "counters", {}).items())},
                "connector_allocated_bytes": self.connector.allocated_bytes() if self.connector and self.state != ServerState.STOPPED else 0,
                "now_us": self.clock.now() if hasattr(self, "clock") else 0,
            }

    @property
    def now(self) -> int:
        return self.clock.now()

    # -- submission ----------------------------------------------------
    def submit(self, req: Request, at: int | None = None) -> ResultHandle:
        """Hand a request to the entry stage; metrics start at submission."""
        with self._lock:
            if self.state != ServerState.RUNNING:
                raise Rejected(f"server is {self.state.value.lower()}")
            if req.request_id in self._seen_ids:
                raise Rejected(f"request id {req.request_id} was already used")
            if not self.sequential and len(self._flights) + self._inbox.qsize() >= self.plan.admission_cap:
                raise Overloaded(f"admission cap {self.plan.admission_cap} reached")
            entry = self.stages[self.plan.graph.entry]
            if entry.kind == StageKind.AR and len(req.prompt_tokens) > entry.cfg.kv_budget_tokens:
                raise Rejected(
                    f"{entry.id}: prompt of {len(req.prompt_tokens)} tokens exceeds kv budget {entry.cfg.kv_budget_tokens}"
                )
            self._seen_ids.add(req.request_id)
            stamped = replace(req, submitted_at=self.clock.now() if at is None else at)
            handle = ResultHandle(self, stamped)
            self._inbox.put((stamped, handle))
            self.counters["submitted"] += 1
        self._wake.set()
        return handle

    def _take_inbox(self) -> bool:
        got = False
        while True:
            try:
                req, handle = self._inbox.get_nowait()
            except queue.Empty:
                return got
            got = True
            if self.sequential:
                self._queued.append((req, handle))
            else:
                self._begin(req, handle)

    def _begin(self, req: Request, handle: ResultHandle) -> None:
        rec = self.metrics.begin(req.request_id, req.submitted_at, self.roles)
        fl = _Flight(req, handle, rec, exits_left=set(self.plan.graph.exits))
        self._flights[req.request_id] = fl
        entry = self.plan.graph.entry
        ctx = RequestContext(req.request_id, current_stage=entry)
        self._enter(fl, entry, Submission(prompt=req.prompt_tokens), ctx)
        self._bump()

    # -- routing -------------------------------------------------------
    def _bump(self) -> None:
        self._epoch += 1

    def _fail(self, fl: _Flight, stage: StageId | None, reason: str) -> None:
        rid = fl.request.request_id
        if rid not in self._flights:
            return
        log.info("request %d failed at %s: %s", rid, stage, reason)
        for rt in self.stages.values():
            rt.engine.abort(rid)
        for ctx in fl.ctxs.values():
            if ctx.status not in (Status.DONE, Status.FAILED):
                ctx.transition(Status.FAILED)
        fl.status = Status.FAILED
        out = FinalOutput(rid, metrics=fl.record, status="FAILED", error=reason, failed_stage=stage)
        self._retire(fl, out)
        self.counters["failed"] += 1

    def _retire(self, fl: _Flight, out: FinalOutput) -> None:
        rid = fl.request.request_id
        del self._flights[rid]
        assert self.connector is not None
        freed = self.connector.cleanup(rid)
        self.counters["freed_bytes"] += freed
        self.results[rid] = out
        fl.handle._finish(out)
        self._bump()
        for cb in self.on_done:
            cb(out)

    def _call_transfer(self, fl: _Flight, edge: TransferEdge, ctx: RequestContext,
                       upstream: Payload | None) -> Submission | None:
        fn = self.registry.transfers[edge.transfer_ref]
        self.transfer_calls[(fl.request.request_id, edge.name)] += 1
        try:
            sub = fn(ctx, edge, upstream, fl.request)
            if not isinstance(sub, Submission):
                raise TypeError(f"transfer returned {type(sub).__name__}, not Submission")
            return sub
        except Exception as exc:
            self._fail(fl, edge.src, f"transfer {edge.transfer_ref} on edge {edge.name} failed: "
                                     f"{type(exc).__name__}: {exc}")
            return None

    def _wire(self, fl: _Flight, stage: StageId) -> None:
        """Open every STREAMING out-edge of ``stage`` for this request."""
        assert self.connector is not None
        rid = fl.request.request_id
        for edge in self.plan.graph.out_edges(stage):
            if edge.mode != EdgeMode.STREAMING:
                continue
            self.wirings[(rid, edge.name)] += 1
            ctx = fl.ctxs[stage]
            sub = self._call_transfer(fl, edge, ctx, None)
            if sub is None:
                return
            fl.senders[edge.pair] = self.connector.open_stream(rid, edge.pair)
            fl.receivers[edge.pair] = self.connector.subscribe(rid, edge.pair)
            self.connector.handoff(rid, edge.pair, encode_handoff(fl.request, edge, sub, ctx))

    def _enter(self, fl: _Flight, stage: StageId, sub: Submission, ctx: RequestContext) -> None:
        rid = fl.request.request_id
        rt = self.stages[stage]
        ctx.current_stage = stage
        ctx.transition(Status.RUNNING)
        fl.ctxs[stage] = ctx
        fl.entered.add(stage)
        fl.params[stage] = dict(sub.params)
        fl.stream_tags[stage] = sub.stream_tag
        if fl.status == Status.QUEUED:
            fl.status = Status.RUNNING
        self._wire(fl, stage)
        if rid not in self._flights:
            return
        try:
            if isinstance(rt.engine, ArEngine):
                params = dict(sub.params)
                if sub.stream_tag:
                    params["stream_tag"] = sub.stream_tag
                prompt = sub.prompt if sub.prompt else fl.request.prompt_tokens
                rt.engine.admit(rid, prompt, ctx, fl.request.seed, params)
            else:
                rt.engine.open_request(rid)
                for i, p in enumerate(sub.jobs):
                    rt.engine.submit_job(self._job(fl, stage, i, p, i == len(sub.jobs) - 1))
        except RejectedTooLarge as exc:
            self._fail(fl, stage, f"rejected: {exc}")
            return
        except Exception as exc:
            self._fail(fl, stage, f"{type(exc).__name__}: {exc}")
            return
        for edge in self.plan.graph.in_edges(stage):
            if edge.mode == EdgeMode.STREAMING:
                self._deliver(fl, stage, fl.receivers[edge.pair].poll())

    def _job(self, fl: _Flight, stage: StageId, seq: int, p: Payload, eos: bool) -> DiffusionJob:
        cfg = self.stages[stage].cfg
        params = fl.params.get(stage, {})
        return DiffusionJob(
            fl.request.request_id, seq, p,
            steps=int(params.get("steps", cfg.denoise_steps)),
            samples_per_token=int(params.get("samples_per_token", cfg.samples_per_token)),
            eos=eos,
        )

    def _deliver(self, fl: _Flight, stage: StageId, chunks: list[StreamChunk]) -> int:
        """Fold inbound stream chunks into the stage's context or job queue."""
        if not chunks or stage not in fl.entered:
            return 0
        rt = self.stages[stage]
        if isinstance(rt.engine, ArEngine):
            ctx = fl.ctxs[stage]
            tag = fl.stream_tags.get(stage) or f"{chunks[0].edge[0]}_out"
            for c in chunks:
                if c.payload.nbytes:
                    ctx.put(stream_key(tag, c.seq), c.payload)
                if c.eos:
                    ctx.put(stream_eos_key(tag), Payload.empty(c.payload.dtype, _width(c.payload)))
            ctx.transition(Status.STREAMING)
        else:
            for c in chunks:
                rt.engine.submit_job(self._job(fl, stage, c.seq, c.payload, c.eos))
        self._bump()
        return len(chunks)

    def _drain(self, stage: StageId, rid: int) -> int:
        fl = self._flights.get(rid)
        if fl is None:
            return 0
        n = 0
        for edge in self.plan.graph.in_edges(stage):
            if edge.mode == EdgeMode.STREAMING and edge.pair in fl.receivers:
                n += self._deliver(fl, stage, fl.receivers[edge.pair].poll())
        return n

    def _route(self) -> bool:
        """Move handoffs and stream chunks to their stages; True if anything moved."""
        assert self.connector is not None
        moved = False
        for edge in sorted(self.plan.graph.edges, key=lambda e: (self.order.index(e.dst), e.src)):
            for rid, blob in self.connector.take_handoffs(edge.pair):
                moved = True
                fl = self._flights.get(rid)
                if fl is None:
                    continue
                req, pair, sub, ctx = decode_handoff(blob)
                fl.joins[edge.dst].append((pair, sub, ctx))
                if len(fl.joins[edge.dst]) == len(self.plan.graph.in_edges(edge.dst)):
                    sub, ctx = self._merge(rid, edge.dst, fl.joins.pop(edge.dst))
                    self._enter(fl, edge.dst, sub, ctx)
            if edge.mode == EdgeMode.STREAMING:
                for rid in self.connector.pending(edge.pair):
                    fl = self._flights.get(rid)
                    if fl is not None and edge.dst in fl.entered:
                        moved |= self._deliver(fl, edge.dst, fl.receivers[edge.pair].poll()) > 0
        if moved:
            self._bump()
        return moved

    @staticmethod
    def _merge(rid: int, stage: StageId, parts: list) -> tuple[Submission, RequestContext]:
        parts = sorted(parts, key=lambda p: p[0])
        if len(parts) == 1:
            return parts[0][1], parts[0][2]
        ctx = RequestContext(rid, current_stage=stage)
        prompt = None
        tag = None
        jobs: list[Payload] = []
        params: dict[str, Any] = {}
        for _, sub, c in parts:
            for k, v in c.store.items():
                ctx.put(k, v)
            prompt = prompt if prompt is not None else sub.prompt
            tag = tag or sub.stream_tag
            jobs.extend(sub.jobs)
            params.update(sub.params)
        return Submission(prompt, tag, tuple(jobs), params), ctx

    # -- engine steps and publication ---------------------------------
    def _schedule(self, t: int, fn: Callable[[], None]) -> None:
        heapq.heappush(self._events, (t, next(self._seq), fn))

    def _step_engines(self, t: int) -> bool:
        stepped = False
        for sid in self.order:
            rt = self.stages[sid]
            if rt.busy or not rt.engine.has_work() or rt.blocked_epoch == self._epoch:
                continue
            result = rt.engine.step()
            if not result.progressed:
                rt.blocked_epoch = self._epoch
                continue
            stepped = True
            rt.iterations += 1
            rt.busy = True
            rt.busy_time += result.cost_us
            self._note_scheduled(rt, result, t)
            self._schedule(t + result.cost_us, lambda rt=rt, r=result, t0=t: self._publish(rt, r, t0))
        return stepped

    def _note_scheduled(self, rt: _StageRuntime, result: IterationResult | DiffusionResult, t: int) -> None:
        if isinstance(result, IterationResult):
            rids = [e.request_id for e in result.batch.entries if e.request_id not in result.stalled]
        else:
            rids = [j.request_id for j in result.jobs]
        for rid in rids:
            fl = self._flights.get(rid)
            if fl is not None:
                st = fl.record.stage(rt.id)
                if st.first_scheduled_at is None:
                    st.first_scheduled_at = t

    def _publish(self, rt: _StageRuntime, result: IterationResult | DiffusionResult, started: int) -> None:
        t = self.clock.now()
        rt.busy = False
        self._bump()
        for rid, n in result.new_tokens.items():
            fl = self._flights.get(rid)
            if fl is not None:
                st = fl.record.stage(rt.id)
                st.tokens += n
                if st.first_token_at is None:
                    st.first_token_at = t
        for chunk in result.chunks:
            fl = self._flights.get(chunk.request_id)
            if fl is None:
                continue
            if chunk.edge[1] == CLIENT:
                if fl.record.first_final_chunk_at is None and (chunk.payload.nbytes or chunk.eos):
                    fl.record.first_final_chunk_at = t
                fl.handle._push(chunk, t)
                continue
            sender = fl.senders.get(chunk.edge)
            if sender is None:
                continue
            try:
                sender.send_chunk(chunk)
            except ConnectorError as exc:
                self._fail(fl, rt.id, f"edge {chunk.edge[0]}->{chunk.edge[1]}: {type(exc).__name__}: {exc}")
        for rid, reason in result.failed.items():
            fl = self._flights.get(rid)
            if fl is not None:
                self._fail(fl, rt.id, reason)
        for rid, final in result.finished.items():
            fl = self._flights.get(rid)
            if fl is not None:
                self._stage_finished(fl, rt.id, final, t)

    def _stage_finished(self, fl: _Flight, stage: StageId, final: Payload, t: int) -> None:
        fl.finished[stage] = final
        fl.record.stage(stage).finished_at = t
        ctx = fl.ctxs[stage]
        for edge in self.plan.graph.out_edges(stage):
            if edge.mode != EdgeMode.FULL:
                continue
            sub = self._call_transfer(fl, edge, ctx, final)
            if sub is None:
                return
            assert self.connector is not None
            self.connector.handoff(fl.request.request_id, edge.pair, encode_handoff(fl.request, edge, sub, ctx))
        ctx.transition(Status.DONE)
        fl.exits_left.discard(stage)
        if not fl.exits_left:
            self._complete(fl, t)

    def _complete(self, fl: _Flight, t: int) -> None:
        rec = fl.record
        rec.done_at = t
        if rec.first_final_chunk_at is None:
            rec.first_final_chunk_at = t
        text = codec = wave = []
        if (s := self.roles.get("text")) in fl.finished:
            text = [r[0] for r in fl.finished[s].rows()]
        if (s := self.roles.get("codec")) in fl.finished:
            codec = [r[0] for r in fl.finished[s].rows()]
        exit_stage = self.plan.graph.exits[0]
        if exit_stage in fl.finished and exit_stage not in (self.roles.get("text"), self.roles.get("codec")):
            wave = fl.finished[exit_stage].values()
        rec.text_token_count, rec.codec_token_count, rec.waveform_sample_count = len(text), len(codec), len(wave)
        fl.status = Status.DONE
        self.counters["done"] += 1
        self._retire(fl, FinalOutput(fl.request.request_id, text, codec, wave, rec))

    # -- the loop ------------------------------------------------------
    def _fixpoint(self) -> None:
        """Do everything possible at the current instant."""
        while True:
            t = self.clock.now()
            fired = False
            while self._events and self._events[0][0] <= t:
                _, _, fn = heapq.heappop(self._events)
                fn()
                fired = True
            got = self._take_inbox()
            if self.sequential and not self._flights and self._queued:
                self._begin(*self._queued.pop(0))
                got = True
            moved = self._route()
            stepped = self._step_engines(t)
            if not (fired or got or moved or stepped):
                return

    def _idle(self) -> bool:
        return not self._flights and not self._queued and self._inbox.empty()

    def run(self, until: Callable[[], bool] | None = None, max_time: int | None = None) -> None:
        """Drive the loop in the calling thread (virtual or wall clock)."""
        with self._lock:
            while True:
                self._fixpoint()
                if until is not None and until():
                    return
                if not self._events:
                    if self._idle() or until is None:
                        return
                    stuck = ", ".join(str(r) for r in sorted(self._flights))
                    for fl in list(self._flights.values()):
                        self._fail(fl, None, "deadlock: no stage can make progress")
                    log.warning("no runnable work; failed requests %s", stuck)
                    continue
                nxt = self._events[0][0]
                if max_time is not None and nxt > max_time:
                    return
                self.clock.advance_to(nxt)

    def run_until_idle(self) -> None:
        self.run(until=self._idle)

    def _serve_forever(self) -> None:
        while True:
            with self._lock:
                if self.state == ServerState.STOPPED:
                    return
                self._fixpoint()
                if self.state == ServerState.DRAINING and self._idle():
                    self._wake.set()
                nxt = self._events[0][0] if self._events else None
                self._wake.clear()
            if nxt is None:
                self._wake.wait(0.05)
            elif self.clock.virtual:
                with self._lock:
                    if self._inbox.empty():
                        self.clock.advance_to(nxt)
            else:
                self.clock.advance_to(nxt, wake=self._wake)

    def shutdown(self, drain: bool = True, timeout: float | None = None) -> ShutdownReport:
        """Stop accepting work; finish (drain) or abort in-flight requests."""
        with self._lock:
            if self.state in (ServerState.STOPPED, ServerState.CREATED):
                return ShutdownReport(already_stopped=True)
            self.state = ServerState.DRAINING
            report = ShutdownReport()
            pending = len(self._flights) + len(self._queued) + self._inbox.qsize()
        if drain:
            if self.background:
                done = threading.Event()
                deadline = None if timeout is None else timeout
                waited = 0.0
                while True:
                    with self._lock:
                        if self._idle():
                            break
                    done.wait(0.01)
                    waited += 0.01
                    if deadline is not None and waited >= deadline:
                        break
            else:
                self.run(until=self._idle)
        with self._lock:
            self._take_inbox()
            for req, handle in self._queued:
                self._begin(req, handle)
            self._queued.clear()
            aborted = list(self._flights.values())
            for fl in aborted:
                self._fail(fl, None, "shutdown")
            report.aborted = len(aborted)
            report.drained = pending - len(aborted)
            report.freed_bytes = self.counters["freed_bytes"]
            self.state = ServerState.STOPPED
            self._wake.set()
            assert self.connector is not None
            self.connector.close()
            self._events.clear()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
        self._report = report
        return report

    def __enter__(self) -> "Orchestrator":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.shutdown(drain=False)


def _width(p: Payload) -> int | None:
    return p.shape[1] if len(p.shape) == 2 else None


def monolithic_plan(plan: DeploymentPlan) -> DeploymentPlan:
    """Same stages and costs, every edge FULL and in-process."""
    edges = tuple(
        replace(e, mode=EdgeMode.FULL, transport=TransportKind.INPROC, streaming_chunk_size=None)
        for e in plan.graph.edges
    )
    graph = replace(plan.graph, edges=edges)
    return replace(plan, graph=graph, transports={})


def run_requests(plan: DeploymentPlan, requests: list[Request], *, sequential: bool = False,
                 registry: Registry | None = None) -> tuple[list[FinalOutput], Orchestrator]:
    """Submit everything at t=0 on a virtual clock and run to completion."""
    orch = Orchestrator(plan, registry=registry, clock=VirtualClock(), sequential=sequential).start()
    try:
        handles = [orch.submit(r) for r in requests]
        orch.run_until_idle()
        return [h.collect() for h in handles], orch
    finally:
        orch.shutdown(drain=False)


__all__ = [
    "ConfigInvalid",
    "DeploymentPlan",
    "EngineSpawnFailed",
    "Orchestrator",
    "Overloaded",
    "Rejected",
    "ResultHandle",
    "ShutdownReport",
    "TransferFnError",
    "decode_handoff",
    "encode_handoff",
    "monolithic_plan",
    "run_requests",
    "GraphInvalid",
]
