"""Scenario files: nodes, links, hierarchy and experiment parameters.

Scenarios are TOML documents. See ``docs/scenario-format.md`` for the
grammar; ``evsync/data/canonical.toml`` is a complete example.
"""
from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Dict, List, Optional, Tuple

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .clockmodel import NS_PER_MS, ClockModel, ConfigurationError, preset
from .netsim import LinkModel

CANONICAL = Path(__file__).with_name("data") / "canonical.toml"


class ScenarioParseError(ValueError):
    """The file is unreadable, not TOML, or has fields of the wrong shape."""


@dataclass(frozen=True)
class NodeSpec:
    id: int
    clock: ClockModel
    clock_name: str = "inline"
    parent: Optional[int] = None
    active: bool = False
    label: str = ""
    offset_ns: int = 0

    @property
    def name(self) -> str:
        return self.label or f"node{self.id}"


@dataclass(frozen=True)
class Experiment:
    start_intervals: Tuple[int, ...] = (500 * NS_PER_MS,)
    repetitions: int = 100
    seed: int = 0
    processing_delay: int = 1 * NS_PER_MS
    sync_gap: int = 500 * NS_PER_MS
    settle: Optional[int] = None
    m3_timeout: Optional[int] = None
    horizon: Optional[int] = None


@dataclass(frozen=True)
class Scenario:
    nodes: Tuple[NodeSpec, ...]
    links: Tuple[LinkModel, ...]
    master: int
    experiment: Experiment = field(default_factory=Experiment)
    name: str = "scenario"

    def node(self, node_id: int) -> NodeSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def children(self, node_id: int) -> Tuple[int, ...]:
        return tuple(sorted(n.id for n in self.nodes if n.parent == node_id and n.id != self.master))

    def active_child(self, node_id: int) -> Optional[int]:
        """Designated active slave of a hop; lowest id if none is flagged."""
        kids = self.children(node_id)
        flagged = [k for k in kids if self.node(k).active]
        if flagged:
            return flagged[0]
        return kids[0] if kids else None

    def role(self, node_id: int) -> str:
        if node_id == self.master:
            return "master"
        n = self.node(node_id)
        return "active" if self.active_child(n.parent) == node_id else "passive"

    def depth(self, node_id: int) -> int:
        d, cur, seen = 0, node_id, set()
        while cur != self.master:
            if cur in seen:
                raise ConfigurationError(f"hierarchy cycle through node {cur}")
            seen.add(cur)
            cur = self.node(cur).parent
            d += 1
        return d

    def hop_link(self, a: int, b: int) -> Optional[LinkModel]:
        shared = [l for l in self.links if a in l.endpoints and b in l.endpoints]
        return shared[0] if len(shared) == 1 else None

    def max_link_delay(self) -> int:
        return max((l.max_delay for l in self.links), default=0)

    def settle(self) -> int:
        """Root's wait between its own session and Start, in its ticks."""
        exp = self.experiment
        if exp.settle is not None:
            return exp.settle
        depth = max((self.depth(n.id) for n in self.nodes), default=0)
        per_hop = exp.sync_gap + 2 * exp.processing_delay + 6 * self.max_link_delay() + 10 * NS_PER_MS
        return math.ceil(Fraction(105, 100) * max(depth - 1, 0) * per_hop) + 10 * NS_PER_MS

    def m3_timeout(self) -> int:
        exp = self.experiment
        if exp.m3_timeout is not None:
            return exp.m3_timeout
        return 10 * (2 * self.max_link_delay() + exp.processing_delay)

    def horizon(self, start_interval: int) -> int:
        if self.experiment.horizon is not None:
            return self.experiment.horizon
        return self.settle() + start_interval + 10_000 * NS_PER_MS


def validate(scenario: Scenario) -> List[str]:
    """Every invariant violation, as human-readable lines; empty if valid."""
    problems: List[str] = []
    ids = [n.id for n in scenario.nodes]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        problems.append(f"duplicate node ids: {dupes}")
    known = set(ids)
    if scenario.master not in known:
        problems.append(f"master {scenario.master} is not a declared node")
        return problems

    for n in scenario.nodes:
        d = n.clock.drift_factor
        if not Fraction(9, 10) < d < Fraction(11, 10):
            problems.append(f"node {n.id}: drift factor {float(d):.6f} outside (0.9, 1.1)")
        if n.id == scenario.master:
            if n.parent is not None:
                problems.append(f"master {n.id} must not have a parent")
            continue
        if n.parent is None:
            problems.append(f"node {n.id} is an orphan: no parent, not the master")
        elif n.parent not in known:
            problems.append(f"node {n.id}: parent {n.parent} is not a declared node")

    for n in scenario.nodes:
        if n.id == scenario.master or n.parent not in known:
            continue
        cur, seen = n.id, set()
        while cur != scenario.master and cur in known and cur not in seen:
            seen.add(cur)
            cur = scenario.node(cur).parent
        if cur != scenario.master:
            problems.append(f"node {n.id} is not reachable from master {scenario.master}")

    for i, link in enumerate(scenario.links):
        for e in link.endpoints:
            if e not in known:
                problems.append(f"link {i}: endpoint {e} is not a declared node")
        problems.extend(f"link {i}: {p}" for p in link.problems())

    for parent in sorted(known):
        kids = scenario.children(parent)
        if not kids:
            continue
        flagged = [k for k in kids if scenario.node(k).active]
        if len(flagged) > 1:
            problems.append(f"node {parent}: more than one active slave designated {flagged}")
        for k in kids:
            if scenario.hop_link(parent, k) is None:
                problems.append(f"node {k}: needs exactly one link shared with its parent {parent}")
        common = [l for l in scenario.links if parent in l.endpoints and all(k in l.endpoints for k in kids)]
        if kids and not common:
            problems.append(
                f"node {parent}: children {list(kids)} do not share one link with it, "
                "so passive slaves cannot overhear the active slave"
            )
    for n in scenario.nodes:
        if n.active and n.parent is not None and n.parent in known and scenario.hop_link(n.parent, n.id) is None:
            problems.append(f"node {n.id}: designated active slave is not adjacent to parent {n.parent}")

    exp = scenario.experiment
    if not exp.start_intervals:
        problems.append("experiment: no start intervals")
    if any(s <= 0 for s in exp.start_intervals):
        problems.append("experiment: start intervals must be positive")
    if exp.repetitions < 1:
        problems.append("experiment: repetitions must be >= 1")
    if exp.sync_gap <= 0:
        problems.append("experiment: sync_gap must be positive")
    if exp.processing_delay < 0:
        problems.append("experiment: processing_delay must be >= 0")
    return problems


# -- parsing -------------------------------------------------------------------

_UNITS = {"_ns": 1, "_us": 1_000, "_ms": NS_PER_MS, "_s": 1_000 * NS_PER_MS}


def _exact(value, where: str) -> Fraction:
    if isinstance(value, bool) or not isinstance(value, (int, float, str)):
        raise ScenarioParseError(f"{where}: expected a number, got {value!r}")
    try:
        # str(float) keeps the decimal the author wrote: 2.5 -> 5/2
        return Fraction(str(value))
    except ValueError:
        raise ScenarioParseError(f"{where}: {value!r} is not a number") from None


def _duration(table: dict, key: str, where: str, default=None):
    """Read ``key_ns``/``key_us``/``key_ms``/``key_s``; return whole ns."""
    hits = [(suffix, table[key + suffix]) for suffix in _UNITS if key + suffix in table]
    if not hits:
        return default
    if len(hits) > 1:
        raise ScenarioParseError(f"{where}: {key} given in more than one unit")
    suffix, raw = hits[0]
    scale = _UNITS[suffix]

    def one(v):
        ns = _exact(v, f"{where}.{key}{suffix}") * scale
        if ns.denominator != 1:
            raise ScenarioParseError(f"{where}.{key}{suffix}: {v!r} is not a whole number of ns")
        return int(ns)

    if isinstance(raw, list):
        return tuple(one(v) for v in raw)
    return one(raw)


def _clock(raw, where: str) -> Tuple[ClockModel, str]:
    if isinstance(raw, str):
        try:
            return preset(raw), raw
        except ConfigurationError as exc:
            raise ScenarioParseError(f"{where}: {exc}") from None
    if isinstance(raw, dict):
        base_name = raw.get("preset", "ideal")
        try:
            base = preset(base_name)
        except ConfigurationError as exc:
            raise ScenarioParseError(f"{where}.preset: {exc}") from None
        drift = base.drift_factor
        if "drift_ppm" in raw:
            drift = 1 + _exact(raw["drift_ppm"], f"{where}.drift_ppm") / 1_000_000
        if "drift_factor" in raw:
            drift = _exact(raw["drift_factor"], f"{where}.drift_factor")
        jitter = raw.get("jitter_ppm", base.jitter_bound_ppm)
        res = raw.get("resolution_ns", base.timer_resolution)
        for k, v in (("jitter_ppm", jitter), ("resolution_ns", res)):
            if isinstance(v, bool) or not isinstance(v, int):
                raise ScenarioParseError(f"{where}.{k}: expected an integer, got {v!r}")
        try:
            return ClockModel(drift, jitter, res), "inline"
        except ConfigurationError as exc:
            raise ScenarioParseError(f"{where}: {exc}") from None
    raise ScenarioParseError(f"{where}: expected a preset name or an inline table")


def _int(table, key, where, default=None, required=False):
    if key not in table:
        if required:
            raise ScenarioParseError(f"{where}: missing required field {key!r}")
        return default
    v = table[key]
    if isinstance(v, bool) or not isinstance(v, int):
        raise ScenarioParseError(f"{where}.{key}: expected an integer, got {v!r}")
    return v


def scenario_from_dict(doc: dict, name: str = "scenario") -> Scenario:
    nodes = []
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list) or not raw_nodes:
        raise ScenarioParseError("[[nodes]]: at least one node is required")
    for i, raw in enumerate(raw_nodes):
        where = f"nodes[{i}]"
        if not isinstance(raw, dict):
            raise ScenarioParseError(f"{where}: expected a table")
        clock, clock_name = _clock(raw.get("clock", "ideal"), f"{where}.clock")
        nodes.append(NodeSpec(
            id=_int(raw, "id", where, required=True),
            clock=clock,
            clock_name=clock_name,
            parent=_int(raw, "parent", where),
            active=bool(raw.get("active", False)),
            label=str(raw.get("label", "")),
            offset_ns=_int(raw, "offset_ns", where, default=0),
        ))

    links = []
    for i, raw in enumerate(doc.get("links", [])):
        where = f"links[{i}]"
        if not isinstance(raw, dict):
            raise ScenarioParseError(f"{where}: expected a table")
        kind = raw.get("kind")
        if kind not in ("wireless", "wired"):
            raise ScenarioParseError(f"{where}.kind: expected 'wireless' or 'wired', got {kind!r}")
        endpoints = raw.get("endpoints")
        if not isinstance(endpoints, list) or not all(isinstance(e, int) for e in endpoints):
            raise ScenarioParseError(f"{where}.endpoints: expected a list of node ids")
        delay = _duration(raw, "delay", where)
        if delay is None:
            raise ScenarioParseError(f"{where}: missing delay (delay_ns / delay_us / delay_ms)")
        if isinstance(delay, int):
            delay = (delay, delay)
        if len(delay) != 2:
            raise ScenarioParseError(f"{where}.delay: expected a value or a [min, max] pair")
        links.append(LinkModel(
            kind=kind,
            endpoints=tuple(endpoints),
            delay=delay,
            loss_probability=_exact(raw.get("loss", 0), f"{where}.loss"),
            reverse_delay=_duration(raw, "reverse_delay", where),
            name=str(raw.get("name", f"link{i}")),
        ))

    hier = doc.get("hierarchy", {})
    if not isinstance(hier, dict):
        raise ScenarioParseError("[hierarchy]: expected a table")
    master = _int(hier, "master", "hierarchy", required=True)

    raw_exp = doc.get("experiment", {})
    if not isinstance(raw_exp, dict):
        raise ScenarioParseError("[experiment]: expected a table")
    intervals = _duration(raw_exp, "start_intervals", "experiment", default=(500 * NS_PER_MS,))
    if isinstance(intervals, int):
        intervals = (intervals,)
    exp = Experiment(
        start_intervals=tuple(intervals),
        repetitions=_int(raw_exp, "repetitions", "experiment", default=100),
        seed=_int(raw_exp, "seed", "experiment", default=0),
        processing_delay=_duration(raw_exp, "processing_delay", "experiment", 1 * NS_PER_MS),
        sync_gap=_duration(raw_exp, "sync_gap", "experiment", 500 * NS_PER_MS),
        settle=_duration(raw_exp, "settle", "experiment"),
        m3_timeout=_duration(raw_exp, "m3_timeout", "experiment"),
        horizon=_duration(raw_exp, "horizon", "experiment"),
    )
    return Scenario(tuple(nodes), tuple(links), master, exp, str(doc.get("name", name)))


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioParseError(f"{path}: cannot read ({exc.strerror})") from None
    return loads_scenario(text, name=path.stem, source=str(path))


def loads_scenario(text: str, name: str = "scenario", source: str = "<string>") -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioParseError(f"{source}: {exc}") from None
    return scenario_from_dict(doc, name)


def canonical() -> Scenario:
    return load_scenario(CANONICAL)


def with_experiment(scenario: Scenario, **changes) -> Scenario:
    return replace(scenario, experiment=replace(scenario.experiment, **changes))


def with_clocks(scenario: Scenario, models: Dict[int, ClockModel]) -> Scenario:
    nodes = tuple(
        replace(n, clock=models[n.id], clock_name="inline") if n.id in models else n
        for n in scenario.nodes
    )
    return replace(scenario, nodes=nodes)
