"""Diffusion-style stage engine: FIFO jobs, fixed-step denoising, job batching.

The denoiser is a closed-form integer map, so the number of denoise steps
only changes the simulated cost, never the output bytes.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .ar_engine import EngineConfig
from .core import DType, EdgeMode, OmniError, Payload, StageId, StreamChunk, TransferEdge

log = logging.getLogger(__name__)

DEFAULT_STEPS = 4
DEFAULT_SAMPLES_PER_TOKEN = 16


class BadDtype(OmniError):
    pass


@dataclass(frozen=True)
class DiffusionJob:
    request_id: int
    chunk_seq: int
    input: Payload
    steps: int = DEFAULT_STEPS
    samples_per_token: int = DEFAULT_SAMPLES_PER_TOKEN
    eos: bool = False

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.samples_per_token < 1:
            raise ValueError("samples_per_token must be >= 1")

    def check(self) -> None:
        if self.input.dtype != DType.I32 or len(self.input.shape) != 1:
            raise BadDtype(
                f"job input must be rank-1 I32, got {self.input.dtype.name} shape {self.input.shape}"
            )


def denoise(job: DiffusionJob) -> Payload:
    """Waveform for a codec chunk: sample s of token c is ((c*(s+1)) mod 128) - 64."""
    job.check()
    c = job.input.array().astype(np.int64)
    s = np.arange(1, job.samples_per_token + 1, dtype=np.int64)
    wave = (np.outer(c, s) % 128) - 64
    return Payload.from_values(DType.I32, wave.reshape(-1))


def job_cost_us(job: DiffusionJob, cfg: EngineConfig) -> int:
    # an empty end-of-stream job has nothing to denoise
    if job.input.nbytes == 0:
        return 0
    return cfg.cost_us(job.steps)


def batch_jobs(queue: deque[DiffusionJob], max_jobs: int) -> list[DiffusionJob]:
    """Pop up to ``max_jobs`` jobs in FIFO order."""
    out = []
    while queue and len(out) < max_jobs:
        out.append(queue.popleft())
    return out


class DiffusionModel(Protocol):
    role: str

    def denoise(self, job: DiffusionJob) -> Payload: ...


@dataclass
class DiffusionResult:
    jobs: list[DiffusionJob]
    cost_us: int = 0
    chunks: list[StreamChunk] = field(default_factory=list)
    new_tokens: dict[int, int] = field(default_factory=dict)
    finished: dict[int, Payload] = field(default_factory=dict)
    failed: dict[int, str] = field(default_factory=dict)

    @property
    def progressed(self) -> bool:
        return bool(self.jobs)


@dataclass
class _ReqOut:
    parts: list[Payload] = field(default_factory=list)
    seqs: dict[tuple[StageId, StageId], int] = field(default_factory=dict)


class DiffusionEngine:
    """Batches whole jobs; a batch costs as much as its slowest member."""

    def __init__(
        self,
        cfg: EngineConfig,
        model: DiffusionModel,
        out_edges: Sequence[TransferEdge] = (),
        client_edge: TransferEdge | None = None,
    ):
        self.cfg = cfg
        self.model = model
        self.out_edges = list(out_edges) + ([client_edge] if client_edge is not None else [])
        self.queue: deque[DiffusionJob] = deque()
        self._out: dict[int, _ReqOut] = {}
        self.batch_log: list[list[tuple[int, int]]] = []

    @property
    def stage(self) -> StageId:
        return self.cfg.stage

    def has_work(self) -> bool:
        return bool(self.queue)

    def knows(self, request_id: int) -> bool:
        return request_id in self._out

    def open_request(self, request_id: int) -> None:
        self._out.setdefault(request_id, _ReqOut())

    def submit_job(self, job: DiffusionJob) -> str:
        job.check()
        self.open_request(job.request_id)
        self.queue.append(job)
        return "queued"

    def abort(self, request_id: int) -> bool:
        before = len(self.queue)
        self.queue = deque(j for j in self.queue if j.request_id != request_id)
        return self._out.pop(request_id, None) is not None or len(self.queue) != before

    def step(self) -> DiffusionResult:
        jobs = batch_jobs(self.queue, self.cfg.max_resident_requests)
        result = DiffusionResult(jobs)
        if not jobs:
            return result
        self.batch_log.append([(j.request_id, j.chunk_seq) for j in jobs])
        result.cost_us = max(job_cost_us(j, self.cfg) for j in jobs)
        done: list[tuple[DiffusionJob, Payload]] = []
        for job in jobs:
            if job.request_id in result.failed:
                continue
            try:
                done.append((job, self.model.denoise(job)))
            except Exception as exc:
                log.info("%s: request %d failed in denoise: %s", self.stage, job.request_id, exc)
                result.failed[job.request_id] = f"{self.stage}: {type(exc).__name__}: {exc}"
        # workers may finish in any order; emit by (request, chunk)
        done.sort(key=lambda jp: (jp[0].request_id, jp[0].chunk_seq))
        for job, wave in done:
            rid = job.request_id
            if rid in result.failed:
                continue
            st = self._out.setdefault(rid, _ReqOut())
            st.parts.append(wave)
            n = wave.shape[0] if wave.shape else 0
            if n:
                result.new_tokens[rid] = result.new_tokens.get(rid, 0) + n
            for edge in self.out_edges:
                if edge.mode == EdgeMode.STREAMING:
                    result.chunks.extend(self._stream(st, edge, rid, wave, job.eos))
                elif job.eos:
                    result.chunks.append(StreamChunk(rid, edge.pair, 0, _concat(st.parts), True))
            if job.eos:
                result.finished[rid] = _concat(st.parts)
                del self._out[rid]
        for rid in result.failed:
            self.abort(rid)
        return result

    @staticmethod
    def _stream(st: _ReqOut, edge: TransferEdge, rid: int, wave: Payload, eos: bool) -> list[StreamChunk]:
        seq = st.seqs.get(edge.pair, 0)
        out = []
        if wave.nbytes or not eos:
            out.append(StreamChunk(rid, edge.pair, seq, wave, False))
            seq += 1
        if eos:
            out.append(StreamChunk(rid, edge.pair, seq, Payload.empty(DType.I32), True))
            seq += 1
        st.seqs[edge.pair] = seq
        return out


def _concat(parts: list[Payload]) -> Payload:
    if not parts:
        return Payload.empty(DType.I32)
    return Payload(DType.I32, (sum(p.shape[0] for p in parts),), b"".join(p.data for p in parts))
