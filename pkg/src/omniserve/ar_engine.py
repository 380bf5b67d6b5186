"""Step-centric autoregressive stage engine.

The engine owns a waiting queue and a set of resident sequences. Each call
to :meth:`ArEngine.step` admits what fits, builds one
:class:`IterationBatch` (decodes first, then chunked prefill), runs the
stage's preprocess and forward functions and returns the emitted stream
chunks plus the simulated cost of the iteration. The engine never touches
the connector or the clock; the orchestrator does both.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Protocol, Sequence

from .core import (
    DType,
    EdgeMode,
    OmniError,
    Payload,
    RequestContext,
    StageId,
    StreamChunk,
    TransferEdge,
)

log = logging.getLogger(__name__)


class RejectedTooLarge(OmniError):
    """Prompt alone exceeds the engine's KV budget."""


class PreprocessStall(OmniError):
    """Upstream data needed for this step has not arrived yet."""


class ForwardError(OmniError):
    pass


class Phase(str, Enum):
    PREFILL = "PREFILL"
    DECODE = "DECODE"
    FINISHED = "FINISHED"


@dataclass(frozen=True)
class EngineConfig:
    stage: StageId
    max_batch_tokens: int = 256
    max_resident_requests: int = 16
    kv_budget_tokens: int = 1 << 20
    workers: int = 1
    prefill_chunk: int = 64
    step_latency_us: int = 1000
    # diffusion stages only
    denoise_steps: int = 4
    samples_per_token: int = 16

    def __post_init__(self) -> None:
        for name in (
            "max_batch_tokens",
            "max_resident_requests",
            "kv_budget_tokens",
            "workers",
            "prefill_chunk",
            "step_latency_us",
            "denoise_steps",
            "samples_per_token",
        ):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ValueError(f"{self.stage}: {name} must be a positive integer, got {value!r}")
        if self.prefill_chunk > self.max_batch_tokens:
            raise ValueError(f"{self.stage}: prefill_chunk exceeds max_batch_tokens")

    def cost_us(self, tokens: int) -> int:
        """Simulated latency of an iteration executing ``tokens`` token-steps."""
        return math.ceil(tokens * self.step_latency_us / self.workers) if tokens else 0


@dataclass
class SeqState:
    request_id: int
    prompt: tuple[int, ...]
    ctx: RequestContext
    seed: int = 0
    phase: Phase = Phase.PREFILL
    consumed_prompt: int = 0
    emitted: list[int] = field(default_factory=list)
    records: list[tuple[int, ...]] = field(default_factory=list)
    rng_state: int = 0
    target_len: int | None = None
    admit_order: int = 0
    params: dict[str, Any] = field(default_factory=dict)
    # per out-edge: records already shipped, next chunk seq
    cursors: dict[tuple[StageId, StageId], list[int]] = field(default_factory=dict)

    @property
    def kv_tokens(self) -> int:
        return len(self.prompt) + len(self.emitted)

    @property
    def remaining_prompt(self) -> int:
        return len(self.prompt) - self.consumed_prompt


@dataclass(frozen=True)
class BatchEntry:
    request_id: int
    phase: Phase
    token_span: int


@dataclass(frozen=True)
class IterationBatch:
    entries: tuple[BatchEntry, ...] = ()

    @property
    def total_tokens(self) -> int:
        return sum(e.token_span for e in self.entries)

    def as_tuples(self) -> list[tuple[int, str, int]]:
        return [(e.request_id, e.phase.value, e.token_span) for e in self.entries]


@dataclass
class IterationResult:
    batch: IterationBatch
    cost_us: int = 0
    executed_tokens: int = 0
    chunks: list[StreamChunk] = field(default_factory=list)
    new_tokens: dict[int, int] = field(default_factory=dict)
    finished: dict[int, Payload] = field(default_factory=dict)
    failed: dict[int, str] = field(default_factory=dict)
    stalled: list[int] = field(default_factory=list)
    preempted: list[int] = field(default_factory=list)

    @property
    def progressed(self) -> bool:
        return bool(self.executed_tokens or self.finished or self.failed or self.preempted)


class ArModel(Protocol):
    """Forward function of an AR stage, stepping one sequence at a time."""

    role: str
    dtype: DType
    row_width: int

    def start(self, seq: SeqState) -> None: ...

    def prefill(self, seq: SeqState, tokens: Sequence[int]) -> None: ...

    def prefill_done(self, seq: SeqState) -> None: ...

    def decode(self, seq: SeqState, step_input: Any) -> tuple[int, ...]: ...


Preprocess = Callable[[RequestContext, SeqState], Any]


def records_payload(records: Sequence[tuple[int, ...]], dtype: DType, width: int) -> Payload:
    if not records:
        return Payload.empty(dtype, width)
    flat = [v for r in records for v in r]
    shape = (len(records),) if width == 1 else (len(records), width)
    return Payload.from_values(dtype, flat, shape)


def emit_output(seq: SeqState, edge: TransferEdge, dtype: DType, width: int) -> list[StreamChunk]:
    """Chunks owed on ``edge`` given everything ``seq`` has produced so far."""
    cur = seq.cursors.setdefault(edge.pair, [0, 0])
    done = seq.phase == Phase.FINISHED
    out: list[StreamChunk] = []

    def ship(rows: Sequence[tuple[int, ...]], eos: bool) -> None:
        out.append(StreamChunk(seq.request_id, edge.pair, cur[1], records_payload(rows, dtype, width), eos))
        cur[1] += 1

    if cur[1] < 0:  # eos already sent
        return out
    if edge.mode == EdgeMode.STREAMING:
        size = edge.streaming_chunk_size or 1
        while len(seq.records) - cur[0] >= size:
            ship(seq.records[cur[0]:cur[0] + size], False)
            cur[0] += size
        if done:
            if cur[0] < len(seq.records):
                ship(seq.records[cur[0]:], False)
                cur[0] = len(seq.records)
            ship((), True)
            cur[1] = -1
    elif done:
        ship(seq.records, True)
        cur[0] = len(seq.records)
        cur[1] = -1
    return out


class ArEngine:
    """Continuous-batching engine for one AR stage."""

    def __init__(
        self,
        cfg: EngineConfig,
        model: ArModel,
        preprocess: Preprocess | None = None,
        out_edges: Sequence[TransferEdge] = (),
        drain: Callable[[int], int] | None = None,
        client_edge: TransferEdge | None = None,
        keep_log: bool = True,
    ):
        self.cfg = cfg
        self.model = model
        self.preprocess = preprocess
        self.out_edges = list(out_edges) + ([client_edge] if client_edge is not None else [])
        self.keep_log = keep_log
        self.drain = drain
        self.waiting: deque[SeqState] = deque()
        self.resident: dict[int, SeqState] = {}
        self.schedule_log: list[list[tuple[int, str, int]]] = []
        self._admitted = 0
        self._kv = 0

    @property
    def stage(self) -> StageId:
        return self.cfg.stage

    @property
    def kv_usage(self) -> int:
        return self._kv

    def has_work(self) -> bool:
        return bool(self.resident or self.waiting)

    def knows(self, request_id: int) -> bool:
        return request_id in self.resident or any(s.request_id == request_id for s in self.waiting)

    # -- admission -----------------------------------------------------
    def admit(
        self,
        request_id: int,
        prompt: Sequence[int],
        ctx: RequestContext,
        seed: int = 0,
        params: dict[str, Any] | None = None,
    ) -> str:
        """Queue a request; returns ``"accepted"`` if it became resident now."""
        prompt = tuple(prompt)
        if not prompt:
            raise ValueError(f"{self.stage}: request {request_id} has an empty prompt")
        if len(prompt) > self.cfg.kv_budget_tokens:
            raise RejectedTooLarge(
                f"{self.stage}: prompt of {len(prompt)} tokens exceeds kv budget {self.cfg.kv_budget_tokens}"
            )
        if self.knows(request_id):
            raise ValueError(f"{self.stage}: request {request_id} already admitted")
        seq = SeqState(request_id, prompt, ctx, seed=seed, params=dict(params or {}))
        seq.admit_order = self._admitted
        self._admitted += 1
        self.model.start(seq)
        self.waiting.append(seq)
        self._admit_waiting()
        return "accepted" if request_id in self.resident else "queued"

    def _fits(self, seq: SeqState) -> bool:
        # a swapped-out decoder must be able to grow by one token, or it
        # would be preempted again straight away
        need = seq.kv_tokens + (1 if seq.phase == Phase.DECODE else 0)
        return (
            len(self.resident) < self.cfg.max_resident_requests
            and self._kv + need <= self.cfg.kv_budget_tokens
        )

    def _admit_waiting(self) -> None:
        # strict FIFO: the head blocks everything behind it
        while self.waiting and self._fits(self.waiting[0]):
            seq = self.waiting.popleft()
            self.resident[seq.request_id] = seq
            self._kv += seq.kv_tokens

    def _evict(self, request_id: int) -> SeqState:
        seq = self.resident.pop(request_id)
        self._kv -= seq.kv_tokens
        return seq

    def abort(self, request_id: int) -> bool:
        if request_id in self.resident:
            self._evict(request_id)
            return True
        for s in list(self.waiting):
            if s.request_id == request_id:
                self.waiting.remove(s)
                return True
        return False

    # -- scheduling ----------------------------------------------------
    def schedule_iteration(self) -> IterationBatch:
        budget = self.cfg.max_batch_tokens
        kv_room = self.cfg.kv_budget_tokens - self._kv
        entries: list[BatchEntry] = []
        for rid in sorted(r for r, s in self.resident.items() if s.phase == Phase.DECODE):
            if budget == 0:
                break
            if kv_room < 1:
                break
            entries.append(BatchEntry(rid, Phase.DECODE, 1))
            budget -= 1
            kv_room -= 1
        prefills = sorted(
            (s for s in self.resident.values() if s.phase == Phase.PREFILL), key=lambda s: s.admit_order
        )
        for s in prefills:
            if budget == 0:
                break
            span = min(self.cfg.prefill_chunk, s.remaining_prompt, budget)
            entries.append(BatchEntry(s.request_id, Phase.PREFILL, span))
            budget -= span
        return IterationBatch(tuple(entries))

    def _preempt_for_progress(self, result: IterationResult) -> None:
        """Nothing can run because the KV budget is full: swap out the youngest."""
        if len(self.resident) <= 1:
            for rid in list(self.resident):
                self._evict(rid)
                result.failed[rid] = (
                    f"{self.stage}: sequence needs more than kv budget {self.cfg.kv_budget_tokens}"
                )
            return
        youngest = max(self.resident.values(), key=lambda s: s.admit_order)
        self._evict(youngest.request_id)
        self.waiting.appendleft(youngest)
        result.preempted.append(youngest.request_id)
        log.debug("%s: preempted request %d to free kv budget", self.stage, youngest.request_id)

    # -- execution -----------------------------------------------------
    def _run_preprocess(self, seq: SeqState) -> Any:
        if self.preprocess is None:
            return None
        try:
            return self.preprocess(seq.ctx, seq)
        except PreprocessStall:
            if self.drain is None or self.drain(seq.request_id) == 0:
                raise
            return self.preprocess(seq.ctx, seq)

    def run_iteration(self, batch: IterationBatch) -> IterationResult:
        result = IterationResult(batch)
        model = self.model
        for entry in batch.entries:
            seq = self.resident[entry.request_id]
            try:
                step_input = self._run_preprocess(seq)
                if entry.phase == Phase.PREFILL:
                    lo = seq.consumed_prompt
                    model.prefill(seq, seq.prompt[lo:lo + entry.token_span])
                    seq.consumed_prompt += entry.token_span
                    result.executed_tokens += entry.token_span
                    if seq.remaining_prompt == 0:
                        seq.phase = Phase.DECODE
                        model.prefill_done(seq)
                elif seq.target_len is None or len(seq.emitted) < seq.target_len:
                    row = tuple(int(v) for v in model.decode(seq, step_input))
                    seq.records.append(row)
                    seq.emitted.append(row[0])
                    self._kv += 1
                    result.executed_tokens += 1
                    result.new_tokens[seq.request_id] = result.new_tokens.get(seq.request_id, 0) + 1
            except PreprocessStall:
                result.stalled.append(seq.request_id)
                continue
            except Exception as exc:
                log.info("%s: request %d failed in forward: %s", self.stage, seq.request_id, exc)
                self._evict(seq.request_id)
                result.failed[seq.request_id] = f"{self.stage}: {type(exc).__name__}: {exc}"
                continue
            if seq.phase == Phase.DECODE and seq.target_len is not None and len(seq.emitted) >= seq.target_len:
                seq.phase = Phase.FINISHED
            for edge in self.out_edges:
                result.chunks.extend(emit_output(seq, edge, model.dtype, model.row_width))
            if seq.phase == Phase.FINISHED:
                self._evict(seq.request_id)
                result.finished[seq.request_id] = records_payload(seq.records, model.dtype, model.row_width)
        result.cost_us = self.cfg.cost_us(result.executed_tokens)
        return result

    def step(self) -> IterationResult:
        """Admit, schedule and run one iteration."""
        self._admit_waiting()
        batch = self.schedule_iteration()
        if self.keep_log:
            self.schedule_log.append(batch.as_tuples())
        if not batch.entries and self.resident:
            result = IterationResult(batch)
            self._preempt_for_progress(result)
            return result
        return self.run_iteration(batch)
