"""``omniserve validate | serve | bench``."""

from __future__ import annotations

import argparse
import logging
import signal
import sys
import threading
from pathlib import Path

from .bench import MODES, format_summary, gen_workload, jct_reduction_pct, run_bench
from .config import ConfigError, load_config
from .connector import PortInUse
from .core import OmniError, default_registry

log = logging.getLogger("omniserve")


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    problems = cfg.plan.problems(default_registry())
    for p in problems:
        print(p)
    if problems:
        print(f"{args.config}: {len(problems)} violation(s)", file=sys.stderr)
        return 1
    print(f"{args.config}: ok ({len(cfg.plan.graph.nodes)} stages, {len(cfg.plan.graph.edges)} edges)")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import OmniServer

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    listen = args.listen or cfg.listen
    stop = threading.Event()
    try:
        server = OmniServer(cfg.plan, listen).start()
    except (OmniError, PortInUse, OSError) as exc:
        print(f"error: cannot start: {exc}", file=sys.stderr)
        return 1
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    print(f"serving on {server.url}", flush=True)
    while not stop.wait(0.2):
        pass
    print("draining", flush=True)
    server.stop(drain=True)
    return 0


def _csv_path(out: str | None, mode: str, both: bool) -> Path | None:
    if out is None:
        return None
    p = Path(out)
    return p.with_name(f"{p.stem}.{mode}{p.suffix or '.csv'}") if both else p


def cmd_bench(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    problems = cfg.plan.problems(default_registry())
    if problems:
        for p in problems:
            print(p, file=sys.stderr)
        return 1
    arrival = args.arrival
    if arrival == "poisson" and args.rate is not None:
        arrival = f"poisson:{args.rate}"
    try:
        workload = gen_workload(args.requests, arrival, rate=args.rate, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    modes = MODES if args.mode == "both" else (args.mode,)
    reports = {}
    for mode in modes:
        rep = run_bench(cfg.plan, workload, mode, wall_clock=args.wall_clock)
        reports[mode] = rep
        path = _csv_path(args.out, mode, len(modes) > 1)
        if path is not None:
            path.write_text(rep.to_csv())
            print(f"wrote {path}")
        print(format_summary(rep))
    if len(modes) > 1:
        red = jct_reduction_pct(reports["disaggregated"], reports["monolithic"])
        print(f"mean JCT reduction (disaggregated vs monolithic): {red:.2f}%")
    failed = sum(1 for r in reports.values() for o in r.outputs if not o.ok)
    if failed:
        print(f"error: {failed} request(s) failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="omniserve", description="Multi-stage serving on a stage graph.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check a deployment config")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)

    s = sub.add_parser("serve", help="run the HTTP server")
    s.add_argument("config")
    s.add_argument("--listen", help="host:port, overrides the config")
    s.set_defaults(fn=cmd_serve)

    b = sub.add_parser("bench", help="benchmark a workload")
    b.add_argument("config")
    b.add_argument("--requests", type=int, default=100)
    b.add_argument("--arrival", default="closed-loop", help="closed-loop[:C] or poisson[:rate]")
    b.add_argument("--rate", type=float, default=None, help="poisson arrivals per second")
    b.add_argument("--mode", choices=(*MODES, "both"), default="disaggregated")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", help="CSV path; with --mode both, one file per mode")
    b.add_argument("--wall-clock", action="store_true", help="time on the wall clock instead of virtual time")
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
