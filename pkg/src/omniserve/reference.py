"""Deterministic Thinker -> Talker -> Vocoder reference pipeline.

The Thinker is an integer recurrence over a 32-bit state ``h``; each decode
step yields a text token and an 8-component hidden state. The Talker turns
every (token, hidden state) pair into 4 codec tokens, and the Vocoder maps
each codec token to ``S`` waveform samples. Everything is registered in the
default function registry under the names used by the shipped configs, and
:func:`monolithic_oracle` recomputes a request end to end without batching
or streaming.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Sequence

from .ar_engine import EngineConfig, Phase, PreprocessStall, SeqState
from .core import (
    DEFAULT_REGISTRY,
    DType,
    EdgeMode,
    HiddenState,
    Payload,
    Request,
    RequestContext,
    Submission,
    TransferEdge,
    stream_eos_key,
    stream_key,
)
from .diffusion_engine import DEFAULT_SAMPLES_PER_TOKEN, DEFAULT_STEPS, DiffusionJob, denoise
from .metrics import FinalOutput, MetricsRecord

MASK32 = 0xFFFFFFFF
FAN_OUT = 4
CODEC_VOCAB = 64
MAX_TEXT_LEN = 64
HIDDEN_TAG = "thinker_hidden"


def mix(h: int, t: int) -> int:
    return (h * 1000003 + t + 1) & MASK32


def prefill_state(prompt: Sequence[int], seed: int = 0) -> int:
    h = seed & MASK32
    for t in prompt:
        h = mix(h, t)
    return h


def target_length(h: int) -> int:
    return (h % MAX_TEXT_LEN) + 1


def talker_codes(token: int, hidden: Sequence[int]) -> list[int]:
    """The 4 codec tokens produced for one Thinker position."""
    if token < 1:
        raise ValueError("thinker tokens are >= 1")
    base = token * 7 + sum(hidden)
    return [(base + i) % CODEC_VOCAB for i in range(FAN_OUT)]


# --------------------------------------------------------------------------
# oracle


@dataclass(frozen=True)
class ThinkerOutput:
    text_tokens: tuple[int, ...]
    hidden: tuple[HiddenState, ...]

    def __post_init__(self) -> None:
        assert len(self.text_tokens) == len(self.hidden)
        assert 1 <= len(self.text_tokens) <= MAX_TEXT_LEN


@dataclass(frozen=True)
class TalkerOutput:
    codec_tokens: tuple[int, ...]


def thinker_generate(prompt: Sequence[int], seed: int = 0) -> ThinkerOutput:
    if not prompt:
        raise ValueError("prompt must be non-empty")
    h = prefill_state(prompt, seed)
    tokens, hidden = [], []
    for i in range(target_length(h)):
        h = mix(h, i)
        tokens.append(h % 255 + 1)
        hidden.append(HiddenState.from_state(h))
    return ThinkerOutput(tuple(tokens), tuple(hidden))


def talker_generate(thinker: ThinkerOutput) -> TalkerOutput:
    out: list[int] = []
    for t, hs in zip(thinker.text_tokens, thinker.hidden):
        out.extend(talker_codes(t, hs.values))
    return TalkerOutput(tuple(out))


def talker_step(ctx: RequestContext, j: int, tag: str = HIDDEN_TAG) -> list[int]:
    """Codec tokens ``4j .. 4j+3`` from the hidden state streamed into ``ctx``."""
    rows, _ = ctx.stream_rows(tag)
    if j >= len(rows):
        raise PreprocessStall(f"request {ctx.request_id}: hidden state {j} not streamed yet")
    row = rows[j]
    return talker_codes(row[0], row[1:9])


def vocoder_decode(codec_tokens: Sequence[int], samples_per_token: int = DEFAULT_SAMPLES_PER_TOKEN,
                   steps: int = DEFAULT_STEPS) -> list[int]:
    job = DiffusionJob(0, 0, Payload.from_values(DType.I32, list(codec_tokens)), steps, samples_per_token, True)
    return denoise(job).values()


# --------------------------------------------------------------------------
# engine-facing models


class ThinkerModel:
    role = "text"
    dtype = DType.U8
    row_width = 9

    def start(self, seq: SeqState) -> None:
        seq.rng_state = seq.seed & MASK32

    def prefill(self, seq: SeqState, tokens: Sequence[int]) -> None:
        h = seq.rng_state
        for t in tokens:
            h = mix(h, t)
        seq.rng_state = h

    def prefill_done(self, seq: SeqState) -> None:
        seq.target_len = target_length(seq.rng_state)

    def decode(self, seq: SeqState, step_input: Any) -> tuple[int, ...]:
        h = mix(seq.rng_state, len(seq.emitted))
        seq.rng_state = h
        return (h % 255 + 1, *HiddenState.from_state(h).values)


class TalkerModel:
    role = "codec"
    dtype = DType.I32
    row_width = 1

    def start(self, seq: SeqState) -> None:
        seq.rng_state = seq.seed & MASK32

    def prefill(self, seq: SeqState, tokens: Sequence[int]) -> None:
        pass

    def prefill_done(self, seq: SeqState) -> None:
        pass

    def decode(self, seq: SeqState, step_input: Any) -> tuple[int, ...]:
        token, hidden = step_input
        return (talker_codes(token, hidden)[len(seq.emitted) % FAN_OUT],)


def process_input(ctx: RequestContext, seq: SeqState) -> Any:
    """Fold the Thinker position needed by this Talker step into its input."""
    tag = seq.params.get("stream_tag") or HIDDEN_TAG
    rows, closed = ctx.stream_rows(tag)
    if closed:
        seq.target_len = FAN_OUT * len(rows)
    if seq.phase != Phase.DECODE:
        return None
    j = len(seq.emitted) // FAN_OUT
    if j < len(rows):
        row = rows[j]
        return row[0], row[1:9]
    if closed:
        return None  # every position consumed; the engine finishes the sequence
    raise PreprocessStall(f"request {ctx.request_id}: waiting for hidden state {j}")


class Denoiser:
    """Vocoder-style forward: codec tokens to waveform samples."""

    def __init__(self, role: str = "waveform"):
        self.role = role

    def denoise(self, job: DiffusionJob) -> Payload:
        return denoise(job)


DEFAULT_REGISTRY.forward("thinker_forward", ThinkerModel())
DEFAULT_REGISTRY.forward("talker_forward", TalkerModel())
DEFAULT_REGISTRY.forward("dit_decode", Denoiser("waveform"))
DEFAULT_REGISTRY.forward("image_decode", Denoiser("image"))
DEFAULT_REGISTRY.preprocess("process_input", process_input)


@DEFAULT_REGISTRY.transfer("Thinker2Talker")
def thinker2talker(ctx: RequestContext, edge: TransferEdge, upstream: Payload | None,
                   request: Request) -> Submission:
    if edge.mode == EdgeMode.STREAMING:
        # text tokens are not known yet; the Talker conditions on the user prompt
        return Submission(prompt=request.prompt_tokens, stream_tag=HIDDEN_TAG)
    assert upstream is not None
    ctx.put(stream_key(HIDDEN_TAG, 0), upstream)
    ctx.put(stream_eos_key(HIDDEN_TAG), Payload.empty(upstream.dtype, upstream.shape[1]))
    text = tuple(r[0] for r in upstream.rows())
    return Submission(prompt=text, stream_tag=HIDDEN_TAG)


@DEFAULT_REGISTRY.transfer("Talker2Vocoder")
def talker2vocoder(ctx: RequestContext, edge: TransferEdge, upstream: Payload | None,
                   request: Request) -> Submission:
    if edge.mode == EdgeMode.STREAMING:
        return Submission()
    assert upstream is not None
    return Submission(jobs=(upstream,))


@DEFAULT_REGISTRY.transfer("ar2dit")
def ar_to_dit(ctx: RequestContext, edge: TransferEdge, upstream: Payload | None,
              request: Request) -> Submission:
    """Text tokens of an AR stage become the latent codes of an image decoder."""
    if edge.mode == EdgeMode.STREAMING or upstream is None:
        raise ValueError("ar2dit needs a FULL edge")
    codes = [r[0] % CODEC_VOCAB for r in upstream.rows()]
    return Submission(jobs=(Payload.from_values(DType.I32, codes),))


# --------------------------------------------------------------------------
# monolithic oracle


REFERENCE_ENGINES = {
    "thinker": EngineConfig("thinker", max_batch_tokens=256, max_resident_requests=16,
                            kv_budget_tokens=1 << 16, workers=2, prefill_chunk=64, step_latency_us=5000),
    "talker": EngineConfig("talker", max_batch_tokens=256, max_resident_requests=16,
                           kv_budget_tokens=1 << 16, workers=1, prefill_chunk=64, step_latency_us=2000),
    "vocoder": EngineConfig("vocoder", max_resident_requests=16, workers=1, step_latency_us=2500,
                            denoise_steps=4, samples_per_token=16),
}


def ar_solo_cost(cfg: EngineConfig, prompt_len: int, out_len: int) -> tuple[int, int, int]:
    """(time to first token, total time, prefill time) of one sequence alone on ``cfg``."""
    prefill = 0
    left = prompt_len
    while left:
        span = min(cfg.prefill_chunk, left, cfg.max_batch_tokens)
        prefill += cfg.cost_us(span)
        left -= span
    step = cfg.cost_us(1)
    return prefill + step, prefill + out_len * step, prefill


def monolithic_oracle(req: Request, engines: dict[str, EngineConfig] | None = None,
                      start_at: int | None = None) -> FinalOutput:
    """Sequential single-request run of the whole pipeline, with its timeline."""
    cfg = {**REFERENCE_ENGINES, **(engines or {})}
    th, tk, vc = cfg["thinker"], cfg["talker"], cfg["vocoder"]
    thinker = thinker_generate(req.prompt_tokens, req.seed)
    talker = talker_generate(thinker)
    wave = vocoder_decode(talker.codec_tokens, vc.samples_per_token, vc.denoise_steps)

    t0 = req.submitted_at if start_at is None else start_at
    rec = MetricsRecord(req.request_id, req.submitted_at,
                        roles={"text": th.stage, "codec": tk.stage, "waveform": vc.stage})
    n_text, n_codec = len(thinker.text_tokens), len(talker.codec_tokens)

    first, total, _ = ar_solo_cost(th, len(req.prompt_tokens), n_text)
    s = rec.stage(th.stage)
    s.first_scheduled_at, s.first_token_at, s.finished_at, s.tokens = t0, t0 + first, t0 + total, n_text
    t0 += total

    # the Talker is prompted with the Thinker's text on a FULL hand-over
    first, total, _ = ar_solo_cost(tk, n_text, n_codec)
    s = rec.stage(tk.stage)
    s.first_scheduled_at, s.first_token_at, s.finished_at, s.tokens = t0, t0 + first, t0 + total, n_codec
    t0 += total

    cost = vc.cost_us(vc.denoise_steps)
    s = rec.stage(vc.stage)
    s.first_scheduled_at, s.first_token_at, s.finished_at, s.tokens = t0, t0 + cost, t0 + cost, len(wave)
    rec.first_final_chunk_at = rec.done_at = t0 + cost

    rec.text_token_count, rec.codec_token_count, rec.waveform_sample_count = n_text, n_codec, len(wave)
    return FinalOutput(req.request_id, list(thinker.text_tokens), list(talker.codec_tokens), wave, rec)
