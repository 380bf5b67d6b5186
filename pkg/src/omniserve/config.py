"""Strict JSON deployment configs.

Top-level keys: ``graph``, ``engines``, ``transports``, ``server`` and
``clock``. Unknown keys anywhere are rejected. Edges without a
``transports`` entry get a default transport of the edge's kind.
Environment overrides: ``OMNI_LISTEN`` for the listen address, plus the
per-edge transport variables read by :meth:`TransportConfig.from_env`.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any

from .ar_engine import EngineConfig
from .connector import TransportConfig
from .core import EdgeMode, OmniError, StageGraph, StageKind, StageNode, TransferEdge, TransportKind
from .orchestrator import DeploymentPlan


class ConfigError(OmniError):
    """The document is not valid JSON or does not match the schema."""


_TOP = {"graph", "engines", "transports", "server", "clock"}
_GRAPH = {"nodes", "edges", "entry", "exits"}
_NODE = {"id", "kind", "engine_config", "forward", "preprocess", "placement"}
_EDGE = {"from", "to", "transfer", "mode", "transport", "streaming_chunk_size"}
_SERVER = {"listen", "admission_cap", "server_id"}
_CLOCK = {"kind", "time_scale"}
_ENGINE_FIELDS = {f.name for f in fields(EngineConfig)} - {"stage"}
_TRANSPORT_FIELDS = {f.name for f in fields(TransportConfig)}


@dataclass
class DeploymentConfig:
    plan: DeploymentPlan
    listen: str = "127.0.0.1:8000"
    source: str = "<dict>"


def _obj(value: Any, where: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = sorted(set(value) - allowed)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    missing = sorted(required - set(value))
    if missing:
        raise ConfigError(f"{where}: missing key(s) {', '.join(missing)}")
    return value


def _str(value: Any, where: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{where}: expected a string")
    return value


def _enum(cls, value: Any, where: str):
    try:
        return cls(_str(value, where).upper())
    except ValueError:
        choices = ", ".join(m.value for m in cls)
        raise ConfigError(f"{where}: {value!r} is not one of {choices}") from None


def parse_config(doc: dict, source: str = "<dict>") -> DeploymentConfig:
    """Build a plan from an already-decoded document (schema checks only)."""
    _obj(doc, "config", _TOP, {"graph", "engines"})
    g = _obj(doc["graph"], "graph", _GRAPH, {"nodes", "edges", "entry", "exits"})
    if not isinstance(g["nodes"], list) or not isinstance(g["edges"], list):
        raise ConfigError("graph: nodes and edges must be lists")

    nodes, placement = [], {}
    for i, raw in enumerate(g["nodes"]):
        where = f"graph.nodes[{i}]"
        n = _obj(raw, where, _NODE, {"id", "kind", "forward"})
        nid = _str(n["id"], f"{where}.id")
        pre = n.get("preprocess")
        nodes.append(
            StageNode(
                nid,
                _enum(StageKind, n["kind"], f"{where}.kind"),
                _str(n.get("engine_config", nid), f"{where}.engine_config"),
                _str(n["forward"], f"{where}.forward"),
                None if pre is None else _str(pre, f"{where}.preprocess"),
            )
        )
        if "placement" in n:
            placement[nid] = _str(n["placement"], f"{where}.placement")

    edges = []
    for i, raw in enumerate(g["edges"]):
        where = f"graph.edges[{i}]"
        e = _obj(raw, where, _EDGE, {"from", "to", "transfer"})
        size = e.get("streaming_chunk_size")
        if size is not None and (not isinstance(size, int) or isinstance(size, bool)):
            raise ConfigError(f"{where}.streaming_chunk_size: expected an integer")
        edges.append(
            TransferEdge(
                _str(e["from"], f"{where}.from"),
                _str(e["to"], f"{where}.to"),
                _str(e["transfer"], f"{where}.transfer"),
                _enum(EdgeMode, e.get("mode", "FULL"), f"{where}.mode"),
                _enum(TransportKind, e.get("transport", "INPROC"), f"{where}.transport"),
                size,
            )
        )
    exits = g["exits"]
    if not isinstance(exits, list):
        raise ConfigError("graph.exits: expected a list")
    graph = StageGraph(tuple(nodes), tuple(edges), _str(g["entry"], "graph.entry"),
                       tuple(_str(x, "graph.exits[]") for x in exits))

    engines: dict[str, EngineConfig] = {}
    for name, raw in _obj(doc["engines"], "engines", set(doc["engines"]) if isinstance(doc["engines"], dict) else set()).items():
        body = _obj(raw, f"engines.{name}", _ENGINE_FIELDS)
        try:
            engines[name] = EngineConfig(stage=name, **body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"engines.{name}: {exc}") from None

    transports: dict[str, TransportConfig] = {}
    traw = doc.get("transports", {})
    for name, raw in _obj(traw, "transports", set(traw) if isinstance(traw, dict) else set()).items():
        body = dict(_obj(raw, f"transports.{name}", _TRANSPORT_FIELDS))
        if "kind" in body:
            body["kind"] = _enum(TransportKind, body["kind"], f"transports.{name}.kind")
        try:
            transports[name] = TransportConfig(**body)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"transports.{name}: {exc}") from None

    server = _obj(doc.get("server", {}), "server", _SERVER)
    cap = server.get("admission_cap", 1024)
    if not isinstance(cap, int) or isinstance(cap, bool):
        raise ConfigError("server.admission_cap: expected an integer")
    listen = os.environ.get("OMNI_LISTEN") or _str(server.get("listen", "127.0.0.1:8000"), "server.listen")

    clock = doc.get("clock", "virtual")
    time_scale = 1.0
    if isinstance(clock, dict):
        c = _obj(clock, "clock", _CLOCK, {"kind"})
        time_scale = c.get("time_scale", 1.0)
        if not isinstance(time_scale, (int, float)) or time_scale <= 0:
            raise ConfigError("clock.time_scale: expected a positive number")
        clock = c["kind"]
    if clock not in ("virtual", "wall"):
        raise ConfigError(f"clock: {clock!r} is not 'virtual' or 'wall'")

    plan = DeploymentPlan(
        graph=graph,
        engine_configs=engines,
        transports=transports,
        placement=placement,
        admission_cap=cap,
        clock=clock,
        time_scale=float(time_scale),
        server_id=server.get("server_id"),
    )
    return DeploymentConfig(plan, listen, source)


def load_config(path: str | os.PathLike) -> DeploymentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return parse_config(doc, str(path))


def shipped_config_path(name: str = "reference.json") -> Path:
    return Path(str(resources.files("omniserve") / "configs" / name))


def reference_config() -> DeploymentConfig:
    return load_config(shipped_config_path("reference.json"))


def reference_plan(
    transport: TransportKind | str | None = None,
    talker_chunk: int | None = None,
    vocoder_chunk: int | None = None,
    mode: EdgeMode | str | None = None,
    inline_threshold: int | None = None,
) -> DeploymentPlan:
    """The shipped 3-stage plan with edge settings optionally overridden."""
    from dataclasses import replace

    plan = reference_config().plan
    chunks = {("thinker", "talker"): talker_chunk, ("talker", "vocoder"): vocoder_chunk}
    edges, transports = [], {}
    for e in plan.graph.edges:
        m = EdgeMode(mode) if mode is not None else e.mode
        k = TransportKind(transport) if transport is not None else e.transport
        size = chunks.get(e.pair) or e.streaming_chunk_size
        e = replace(e, mode=m, transport=k, streaming_chunk_size=size if m == EdgeMode.STREAMING else None)
        edges.append(e)
        t = replace(plan.transports.get(e.name, TransportConfig()), kind=k)
        if inline_threshold is not None:
            t = replace(t, inline_threshold=inline_threshold)
        transports[e.name] = t
    return replace(plan, graph=replace(plan.graph, edges=tuple(edges)), transports=transports)
