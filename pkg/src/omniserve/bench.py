"""Workload generation and the disaggregated-vs-monolithic benchmark harness."""

from __future__ import annotations

import csv
import io
import logging
import math
import random
from dataclasses import dataclass, field
from statistics import fmean
from typing import Iterable

from .clock import VirtualClock, make_clock
from .core import Registry, Request, TransportKind
from .metrics import FinalOutput, IncompleteRecord, MetricsRecord, NoAudio, jct, rtf, stage_span, tps, ttft
from .orchestrator import DeploymentPlan, Orchestrator, monolithic_plan

log = logging.getLogger(__name__)

CSV_VERSION = "# omniserve-bench v1"
COLUMNS = (
    "request_id", "submitted_at", "jct_us", "ttft_us", "rtf", "thinker_tps", "talker_tps",
    "text_tokens", "codec_tokens", "waveform_samples", "status",
)
SUMMARY_COLUMNS = COLUMNS[2:10]
FLOAT_COLUMNS = {"rtf", "thinker_tps", "talker_tps"}
DEFAULT_PROMPT_LEN = (16, 128)
# mean default prompt length over the mean multimodal input length it stands in for
PROMPT_SCALE = (72, 841.6)
MODES = ("disaggregated", "monolithic")


@dataclass(frozen=True)
class Workload:
    requests: tuple[Request, ...]
    arrival: str = "closed-loop"
    concurrency: int = 16
    rate: float | None = None
    arrivals_us: tuple[int, ...] | None = None
    seed: int = 0
    prompt_len: tuple[int, int] = DEFAULT_PROMPT_LEN

    @property
    def label(self) -> str:
        if self.arrival == "poisson":
            return f"poisson:{self.rate:g}/s"
        return f"closed-loop:{self.concurrency}"


def parse_arrival(text: str, rate: float | None = None) -> tuple[str, int, float | None]:
    """``closed-loop[:C]`` or ``poisson[:rate]`` to (kind, concurrency, rate)."""
    kind, _, arg = text.partition(":")
    if kind == "closed-loop":
        c = int(arg) if arg else 16
        if c < 1:
            raise ValueError("closed-loop concurrency must be at least 1")
        return kind, c, None
    if kind == "poisson":
        r = float(arg) if arg else (rate if rate is not None else 2.0)
        if not r > 0:
            raise ValueError("poisson rate must be positive")
        return kind, 16, r
    raise ValueError(f"unknown arrival process {text!r}")


def gen_workload(
    n: int,
    arrival: str = "closed-loop",
    *,
    rate: float | None = None,
    prompt_len: tuple[int, int] = DEFAULT_PROMPT_LEN,
    seed: int = 0,
) -> Workload:
    """Seeded request list; prompt lengths are uniform over ``prompt_len``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = prompt_len
    if not 1 <= lo <= hi:
        raise ValueError("prompt_len must satisfy 1 <= lo <= hi")
    kind, concurrency, r = parse_arrival(arrival, rate)
    rng = random.Random(seed)
    reqs = []
    for i in range(n):
        length = rng.randint(lo, hi)
        prompt = tuple(rng.randint(1, 255) for _ in range(length))
        reqs.append(Request(i + 1, prompt, seed=rng.getrandbits(32)))
    arrivals = None
    if kind == "poisson":
        t, out = 0.0, []
        for _ in range(n):
            out.append(round(t * 1_000_000))
            t += rng.expovariate(r)
        arrivals = tuple(out)
    return Workload(tuple(reqs), kind, concurrency, r, arrivals, seed, (lo, hi))


@dataclass
class BenchReport:
    mode: str
    workload: Workload
    outputs: list[FinalOutput]
    rows: list[dict[str, str]] = field(default_factory=list)
    summary: list[dict[str, str]] = field(default_factory=list)
    stage_shares: dict[str, float] = field(default_factory=dict)
    stage_mean_span_us: dict[str, float] = field(default_factory=dict)

    @property
    def mean_jct_us(self) -> float:
        return float(self.summary[0]["jct_us"])

    def to_csv(self) -> str:
        return write_csv(self)


def _fmt(col: str, value: float | int | None) -> str:
    if value is None:
        return ""
    if col in FLOAT_COLUMNS or isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _role_tps(rec: MetricsRecord, role: str) -> float | None:
    stage = rec.role_stage(role)
    if stage is None:
        return None
    try:
        return tps(rec, stage)
    except IncompleteRecord:
        return None


def row_for(out: FinalOutput) -> dict[str, str]:
    rec = out.metrics
    vals: dict[str, float | int | None] = {c: None for c in COLUMNS}
    vals["request_id"] = out.request_id
    vals["status"] = out.status
    if rec is not None:
        vals["submitted_at"] = rec.submitted_at
        vals["text_tokens"] = rec.text_token_count
        vals["codec_tokens"] = rec.codec_token_count
        vals["waveform_samples"] = rec.waveform_sample_count
        if out.ok:
            vals["jct_us"] = jct(rec)
            vals["ttft_us"] = ttft(rec)
            try:
                vals["rtf"] = rtf(rec)
            except NoAudio:
                pass
            vals["thinker_tps"] = _role_tps(rec, "text")
            vals["talker_tps"] = _role_tps(rec, "codec")
    return {c: (v if c == "status" else _fmt(c, v)) for c, v in vals.items()}


def nearest_rank(sorted_vals: list[float], q: float) -> float:
    """Nearest-rank percentile of an ascending list."""
    k = max(1, math.ceil(q / 100 * len(sorted_vals)))
    return sorted_vals[k - 1]


def summarize(rows: Iterable[dict[str, str]]) -> list[dict[str, str]]:
    """mean/p50/p95 rows computed from the formatted cells of DONE rows."""
    done = [r for r in rows if r["status"] == "DONE"]
    out = []
    for label in ("mean", "p50", "p95"):
        row = {c: "" for c in COLUMNS}
        row["request_id"] = f"summary:{label}"
        for col in SUMMARY_COLUMNS:
            cells = [r[col] for r in done if r[col] != ""]
            if not cells:
                continue
            if label == "mean":
                row[col] = f"{fmean(float(c) for c in cells):.6f}"
            else:
                vals = sorted(cells, key=float)
                q = 50 if label == "p50" else 95
                row[col] = nearest_rank(vals, q)
        out.append(row)
    return out


def _header(report: BenchReport) -> list[str]:
    w = report.workload
    return [
        CSV_VERSION,
        f"# mode={report.mode} arrival={w.label} requests={len(w.requests)} seed={w.seed}",
        f"# prompt_len=uniform[{w.prompt_len[0]},{w.prompt_len[1]}] input scale factor "
        f"{PROMPT_SCALE[0]}/{PROMPT_SCALE[1]} = {PROMPT_SCALE[0] / PROMPT_SCALE[1]:.4f}",
        "# times in microseconds; tps elapsed measured from the stage's first scheduled iteration",
    ]


def write_csv(report: BenchReport) -> str:
    buf = io.StringIO()
    for line in _header(report):
        buf.write(line + "\n")
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(report.rows)
    w.writerows(report.summary)
    return buf.getvalue()


def read_csv(text: str) -> tuple[list[dict[str, str]], list[dict[str, str]]]:
    """Parse a report back into (request rows, summary rows)."""
    lines = text.splitlines()
    if not lines or lines[0] != CSV_VERSION:
        raise ValueError("not an omniserve-bench v1 report")
    body = [ln for ln in lines if not ln.startswith("#")]
    rows = list(csv.DictReader(body))
    data = [r for r in rows if not r["request_id"].startswith("summary:")]
    summary = [r for r in rows if r["request_id"].startswith("summary:")]
    return data, summary


def stage_decomposition(records: list[MetricsRecord], stages: Iterable[str]) -> tuple[dict[str, float], dict[str, float]]:
    """Mean per-request busy span of each stage and its share of the total."""
    spans: dict[str, float] = {}
    for s in stages:
        vals = []
        for rec in records:
            try:
                vals.append(stage_span(rec, s))
            except IncompleteRecord:
                continue
        if vals:
            spans[s] = fmean(vals)
    total = sum(spans.values())
    shares = {s: (v / total if total else 0.0) for s, v in spans.items()}
    return spans, shares


def _drive(orch: Orchestrator, workload: Workload) -> list[FinalOutput]:
    reqs = list(workload.requests)
    handles = []
    if workload.arrival == "poisson":
        assert workload.arrivals_us is not None
        for req, at in zip(reqs, workload.arrivals_us):
            orch.run(max_time=at)
            if orch.clock.virtual:
                orch.clock.advance_to(at)
            handles.append(orch.submit(req, at=at if orch.clock.virtual else None))
    else:
        pending = iter(reqs[workload.concurrency:])

        def refill(_: FinalOutput) -> None:
            nxt = next(pending, None)
            if nxt is not None:
                handles.append(orch.submit(nxt))

        orch.on_done.append(refill)
        for req in reqs[: workload.concurrency]:
            handles.append(orch.submit(req))
    orch.run_until_idle()
    return [h.collect() for h in handles]


def run_bench(
    plan: DeploymentPlan,
    workload: Workload,
    mode: str = "disaggregated",
    *,
    registry: Registry | None = None,
    wall_clock: bool = False,
) -> BenchReport:
    """Run ``workload`` and build the per-request rows and summary."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {', '.join(MODES)}")
    sequential = mode == "monolithic"
    if sequential:
        if any(e.transport != TransportKind.INPROC for e in plan.graph.edges):
            log.warning("monolithic mode runs in-process; configured transports are ignored")
        plan = monolithic_plan(plan)
    clock = make_clock("wall", plan.time_scale) if wall_clock else VirtualClock()
    orch = Orchestrator(plan, registry=registry, clock=clock, sequential=sequential).start()
    try:
        outputs = _drive(orch, workload)
    finally:
        orch.shutdown(drain=False)
    outputs.sort(key=lambda o: o.request_id)
    for o in outputs:
        if not o.ok:
            log.warning("request %d %s at %s: %s", o.request_id, o.status, o.failed_stage, o.error)
    report = BenchReport(mode, workload, outputs)
    report.rows = [row_for(o) for o in outputs]
    report.summary = summarize(report.rows)
    recs = [o.metrics for o in outputs if o.ok and o.metrics is not None]
    stages = [n.id for n in plan.graph.nodes]
    report.stage_mean_span_us, report.stage_shares = stage_decomposition(recs, stages)
    return report


def jct_reduction_pct(disaggregated: BenchReport, monolithic: BenchReport) -> float:
    """Relative drop in mean JCT going from monolithic to disaggregated."""
    base = monolithic.mean_jct_us
    return (base - disaggregated.mean_jct_us) / base * 100.0


def format_summary(report: BenchReport) -> str:
    lines = [f"[{report.mode}] {len(report.rows)} requests, {report.workload.label}"]
    lines.append(f"  {'':14}" + "".join(f"{c:>16}" for c in ("jct_us", "ttft_us", "rtf", "thinker_tps", "talker_tps")))
    for row in report.summary:
        lines.append(f"  {row['request_id']:14}" + "".join(
            f"{row[c]:>16}" for c in ("jct_us", "ttft_us", "rtf", "thinker_tps", "talker_tps")))
    lines.append("  stage share of busy time: " + ", ".join(
        f"{s}={v * 100:.1f}%" for s, v in report.stage_shares.items()))
    return "\n".join(lines)


__all__ = [
    "BenchReport",
    "COLUMNS",
    "CSV_VERSION",
    "Workload",
    "format_summary",
    "gen_workload",
    "jct_reduction_pct",
    "nearest_rank",
    "parse_arrival",
    "read_csv",
    "row_for",
    "run_bench",
    "stage_decomposition",
    "summarize",
    "write_csv",
]
