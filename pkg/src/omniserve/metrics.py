"""Per-request event timelines and the serving metrics derived from them.

All timestamps are integer microseconds on the active clock.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

from .core import OmniError, StageId

DEFAULT_SAMPLE_RATE = 16000


class IncompleteRecord(OmniError):
    pass


class NoAudio(OmniError):
    pass


@dataclass
class StageTimes:
    first_scheduled_at: int | None = None
    first_token_at: int | None = None
    finished_at: int | None = None
    tokens: int = 0


@dataclass
class MetricsRecord:
    request_id: int
    submitted_at: int
    stages: dict[StageId, StageTimes] = field(default_factory=dict)
    first_final_chunk_at: int | None = None
    done_at: int | None = None
    text_token_count: int = 0
    codec_token_count: int = 0
    waveform_sample_count: int = 0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    # output role ("text", "codec", "waveform") -> stage producing it
    roles: dict[str, StageId] = field(default_factory=dict)

    def stage(self, stage: StageId) -> StageTimes:
        return self.stages.setdefault(stage, StageTimes())

    def role_stage(self, role: str) -> StageId | None:
        return self.roles.get(role)

    def to_json(self) -> dict:
        return {
            "request_id": self.request_id,
            "submitted_at": self.submitted_at,
            "first_final_chunk_at": self.first_final_chunk_at,
            "done_at": self.done_at,
            "text_tokens": self.text_token_count,
            "codec_tokens": self.codec_token_count,
            "waveform_samples": self.waveform_sample_count,
            "sample_rate": self.sample_rate,
            "stages": {
                s: {
                    "first_scheduled_at": t.first_scheduled_at,
                    "first_token_at": t.first_token_at,
                    "finished_at": t.finished_at,
                    "tokens": t.tokens,
                }
                for s, t in sorted(self.stages.items())
            },
        }


def jct(rec: MetricsRecord) -> int:
    """Job completion time in microseconds."""
    if rec.done_at is None:
        raise IncompleteRecord(f"request {rec.request_id} has no completion time")
    if rec.done_at < rec.submitted_at:
        raise IncompleteRecord(f"request {rec.request_id} finished before it was submitted")
    return rec.done_at - rec.submitted_at


def ttft(rec: MetricsRecord) -> int:
    """Submission to first chunk of final output, in microseconds."""
    if rec.first_final_chunk_at is None:
        raise IncompleteRecord(f"request {rec.request_id} produced no final output chunk")
    if rec.first_final_chunk_at < rec.submitted_at:
        raise IncompleteRecord(f"request {rec.request_id}: first chunk precedes submission")
    return rec.first_final_chunk_at - rec.submitted_at


def audio_seconds(rec: MetricsRecord) -> float:
    return rec.waveform_sample_count / rec.sample_rate


def rtf(rec: MetricsRecord) -> float:
    """Processing time over generated audio duration."""
    if rec.waveform_sample_count <= 0:
        raise NoAudio(f"request {rec.request_id} generated no audio")
    # one rounding step: exact whenever the true ratio is representable
    return jct(rec) * rec.sample_rate / (rec.waveform_sample_count * 1_000_000)


def stage_span(rec: MetricsRecord, stage: StageId) -> int:
    t = rec.stages.get(stage)
    if t is None or t.first_scheduled_at is None or t.finished_at is None:
        raise IncompleteRecord(f"request {rec.request_id}: stage {stage} did not finish")
    return t.finished_at - t.first_scheduled_at


def tps(rec: MetricsRecord, stage: StageId) -> float:
    """Tokens generated by ``stage`` per second, timed from its first scheduled iteration."""
    span = stage_span(rec, stage)
    if span <= 0:
        raise IncompleteRecord(f"request {rec.request_id}: stage {stage} has zero elapsed time")
    return rec.stages[stage].tokens * 1_000_000 / span


class MetricsCollector:
    """Thread-safe store of records keyed by request id."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._records: dict[int, MetricsRecord] = {}

    def begin(self, request_id: int, submitted_at: int, roles: dict[str, StageId] | None = None) -> MetricsRecord:
        with self._lock:
            rec = MetricsRecord(request_id, submitted_at, roles=dict(roles or {}))
            self._records[request_id] = rec
            return rec

    def get(self, request_id: int) -> MetricsRecord:
        with self._lock:
            return self._records[request_id]

    def records(self) -> list[MetricsRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)


@dataclass
class FinalOutput:
    request_id: int
    text_tokens: list[int] = field(default_factory=list)
    codec_tokens: list[int] = field(default_factory=list)
    waveform: list[int] = field(default_factory=list)
    metrics: MetricsRecord | None = None
    status: str = "DONE"
    error: str | None = None
    failed_stage: StageId | None = None

    @property
    def ok(self) -> bool:
        return self.status == "DONE"

    def outputs(self) -> tuple[list[int], list[int], list[int]]:
        return self.text_tokens, self.codec_tokens, self.waveform
