"""Scenario configuration files.

A configuration is a TOML document::

    name = "two_nodes"
    backup_nodes = [2, 3]          # optional

    [topology]                     # TopologySpec fields
    node_count = 4
    [policies]                     # Policies fields
    c4p = true
    [run]                          # RunSpec fields
    seed = 1

    [[jobs]]                       # JobSpec fields; ranks either explicit
    job_id = 0                     # ([[node, gpu], ...]) or generated by
    layout = "rail_ring"           # layout = "rail_ring" over nodes/gpus
    nodes = [0, 1]
    gpus = 8
    total_bytes = 1073741824

    [[faults]]
    time_s = 0.5
    kind = "link_down"
    target = [40]

    [downtime]                     # optional Monte-Carlo regime
    incidents_per_month = 40.0
    ...

Unknown keys are rejected.  ``--set`` overrides use dotted paths, with
list indices for repeated sections: ``run.seed=3``, ``jobs.0.iterations=2``.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Iterable

import tomli

from .c4d.downtime import DowntimeRegime
from .errors import ConfigError
from .simengine.scenario import (
    Fault, JobSpec, Policies, RunSpec, Scenario, TopologySpec, rail_ring,
)

TOP_KEYS = {"name", "description", "backup_nodes", "probers", "topology", "policies", "run", "jobs",
            "faults", "downtime"}
JOB_EXTRA = {"layout", "nodes", "gpus"}
DOWNTIME_KEYS = {f.name for f in dataclasses.fields(DowntimeRegime)} | {"trials"}


@dataclass
class Config:
    name: str
    scenario: Scenario
    downtime: DowntimeRegime | None = None
    trials: int = 1000
    raw: dict | None = None
    probers: dict[int, int] | None = None  # leaf -> node that sends its probes


def preset_names() -> list[str]:
    files = resources.files("c4sim") / "presets"
    return sorted(p.name[:-4] for p in files.iterdir() if p.name.endswith(".cfg"))


def resolve_path(ref: str) -> str:
    """Read a config given a path or a bundled preset name."""
    p = Path(ref)
    if p.is_file():
        return p.read_text()
    name = ref[:-4] if ref.endswith(".cfg") else ref
    f = resources.files("c4sim") / "presets" / f"{name}.cfg"
    if f.is_file():
        return f.read_text()
    raise ConfigError(f"no such config file or preset: {ref!r}")


def parse_text(text: str) -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        msg = str(exc)
        line = col = None
        # tomli reports "(at line L, column C)"
        if "(at line" in msg:
            tail = msg[msg.rindex("(at line") + 8:].rstrip(")")
            try:
                a, b = tail.split(", column")
                line, col = int(a), int(b)
                msg = msg[:msg.rindex("(at line")].strip()
            except ValueError:
                pass
        raise ConfigError(msg, line, col) from exc


def _parse_value(text: str) -> Any:
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_overrides(raw: dict, overrides: Iterable[str]) -> dict:
    raw = copy.deepcopy(raw)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override must look like key=value, got {item!r}")
        parts = key.strip().split(".")
        node: Any = raw
        for i, part in enumerate(parts[:-1]):
            if isinstance(node, list):
                try:
                    node = node[int(part)]
                except (ValueError, IndexError):
                    raise ConfigError(f"override {key!r}: no element {part!r}") from None
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            raise ConfigError(f"override {key!r} must name a field")
        node[last] = _parse_value(value.strip())
    return raw


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(where: str, table: dict, allowed: set[str]) -> None:
    if not isinstance(table, dict):
        raise ConfigError(f"[{where}] must be a table")
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"[{where}] unknown key(s): {', '.join(unknown)}")


def _build(cls, where: str, table: dict, extra: set[str] = frozenset()):
    _check_keys(where, table, _fields(cls) | extra)
    kw = {k: v for k, v in table.items() if k not in extra}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from exc


def _job(i: int, t: dict) -> JobSpec:
    t = dict(t)
    where = f"jobs.{i}"
    _check_keys(where, t, _fields(JobSpec) | JOB_EXTRA)
    layout = t.pop("layout", None)
    nodes, gpus = t.pop("nodes", None), t.pop("gpus", None)
    if layout is not None:
        if layout != "rail_ring" or nodes is None:
            raise ConfigError(f"[{where}] layout must be \"rail_ring\" with a nodes list")
        if "ranks" in t:
            raise ConfigError(f"[{where}] give either ranks or a layout, not both")
        t["ranks"] = rail_ring(nodes, gpus or 8)
    elif "ranks" not in t:
        raise ConfigError(f"[{where}] needs ranks or a layout")
    t["ranks"] = [tuple(r) for r in t["ranks"]]
    t.setdefault("job_id", i)
    return _build(JobSpec, where, t)


def _fault(i: int, t: dict) -> Fault:
    t = dict(t)
    t["target"] = tuple(t.get("target", ()))
    return _build(Fault, f"faults.{i}", t)


def build_config(raw: dict) -> Config:
    _check_keys("top level", raw, TOP_KEYS)
    topo = _build(TopologySpec, "topology", raw.get("topology", {}))
    pol = _build(Policies, "policies", raw.get("policies", {}))
    run = raw.get("run", {})
    runspec = _build(RunSpec, "run", run)
    jobs = [_job(i, t) for i, t in enumerate(raw.get("jobs", []))]
    faults = [_fault(i, t) for i, t in enumerate(raw.get("faults", []))]
    sc = Scenario(topo, jobs, faults, pol, runspec, raw.get("backup_nodes"))
    regime, trials = None, 1000
    if "downtime" in raw:
        d = dict(raw["downtime"])
        _check_keys("downtime", d, DOWNTIME_KEYS)
        trials = int(d.pop("trials", 1000))
        try:
            regime = DowntimeRegime(**d)
        except TypeError as exc:
            raise ConfigError(f"[downtime] {exc}") from exc
        if set(regime.class_mix) - set(regime.diagnosis_h):
            raise ConfigError("[downtime] every class in class_mix needs a diagnosis_h entry")
    if jobs or faults:
        sc.validate()
    if runspec.duration_s <= 0:
        raise ConfigError("[run] duration_s must be positive")
    probers = None
    if "probers" in raw:
        try:
            probers = {int(k): int(v) for k, v in raw["probers"].items()}
        except (AttributeError, ValueError) as exc:
            raise ConfigError("probers must map leaf index to node id") from exc
    return Config(str(raw.get("name", "scenario")), sc, regime, trials, raw, probers)


def load_config(ref: str, overrides: Iterable[str] = ()) -> Config:
    """Parse, override and validate a config file or preset name."""
    return build_config(apply_overrides(parse_text(resolve_path(ref)), overrides))
