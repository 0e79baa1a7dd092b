"""Deterministic discrete-event simulation of a synchronizing network.

The simulator owns ground truth: it advances :class:`GlobalTime`, hands
each node readings of its own drifting clock, moves messages over link
models and records every observable step in an :class:`EventLog`.
"""
from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Dict, Iterable, List, Optional, Tuple

from . import protocol as proto
from .clockmodel import ConfigurationError, GlobalTime, LocalTicks, NodeClock
from .rng import substream

if TYPE_CHECKING:
    from .scenario import Scenario


@dataclass(frozen=True)
class LinkModel:
    """A wireless broadcast domain or a wired point-to-point link.

    ``delay`` is a ``(min, max)`` range in ns; each delivery draws
    uniformly from it. For wired links ``reverse_delay`` optionally sets the
    constant delay from ``endpoints[1]`` back to ``endpoints[0]``.
    """

    kind: str
    endpoints: Tuple[int, ...]
    delay: Tuple[int, int]
    loss_probability: Fraction = Fraction(0)
    reverse_delay: Optional[int] = None
    name: str = "link"

    @property
    def max_delay(self) -> int:
        return max(self.delay[1], self.reverse_delay or 0)

    @property
    def constant(self) -> bool:
        return self.delay[0] == self.delay[1]

    def problems(self) -> List[str]:
        out = []
        lo, hi = self.delay
        if lo < 0 or lo > hi:
            out.append(f"delay range [{lo}, {hi}] ns is invalid")
        if not 0 <= self.loss_probability <= 1:
            out.append("loss probability outside [0, 1]")
        if len(set(self.endpoints)) != len(self.endpoints):
            out.append("repeated endpoint")
        if self.kind == "wired":
            if len(self.endpoints) != 2:
                out.append("wired link needs exactly 2 endpoints")
            if self.loss_probability != 0:
                out.append("wired link must be lossless")
            if not self.constant:
                out.append("wired link delay must be constant")
            if self.reverse_delay is not None and self.reverse_delay < 0:
                out.append("reverse delay must be >= 0")
        else:
            if len(self.endpoints) < 2:
                out.append("wireless link needs at least 2 endpoints")
            if self.reverse_delay is not None:
                out.append("reverse_delay is only meaningful on wired links")
        return out

    def one_way(self, sender: int, receiver: int) -> Tuple[int, int]:
        if self.kind == "wired" and self.reverse_delay is not None and sender == self.endpoints[1]:
            return (self.reverse_delay, self.reverse_delay)
        return self.delay


def deliver(link: LinkModel, msg, sender: int, send_time: GlobalTime,
            delay_rng: random.Random | None = None,
            loss_rng: random.Random | None = None) -> List[Tuple[int, Optional[GlobalTime]]]:
    """Receivers of one transmission, each with its arrival time or None if lost."""
    if sender not in link.endpoints:
        raise ConfigurationError(f"node {sender} is not on link {link.name}")
    out = []
    for receiver in sorted(e for e in link.endpoints if e != sender):
        if link.loss_probability > 0:
            if loss_rng is None:
                raise ConfigurationError("lossy link needs a loss rng")
            if loss_rng.random() < link.loss_probability:
                out.append((receiver, None))
                continue
        lo, hi = link.one_way(sender, receiver)
        if lo == hi:
            d = lo
        else:
            if delay_rng is None:
                raise ConfigurationError("variable-delay link needs a delay rng")
            d = delay_rng.randint(lo, hi)
        out.append((receiver, send_time + GlobalTime(d)))
    return out


class EventQueue:
    """Min-heap of events keyed by (time, insertion sequence, node)."""

    def __init__(self):
        self._heap = []
        self._seq = 0
        self._last: Optional[Fraction] = None

    def push(self, time: GlobalTime, node, event) -> None:
        heapq.heappush(self._heap, (time.ns, self._seq, node, event))
        self._seq += 1

    def pop(self):
        t, _, node, event = heapq.heappop(self._heap)
        if self._last is not None and t < self._last:
            raise RuntimeError("event queue went back in time")
        self._last = t
        return GlobalTime(t), node, event

    def peek_time(self) -> Optional[GlobalTime]:
        return GlobalTime(self._heap[0][0]) if self._heap else None

    def __len__(self):
        return len(self._heap)

    def pending(self) -> Iterable:
        return (entry[3] for entry in self._heap)


@dataclass(frozen=True)
class LogRecord:
    seq: int
    time: GlobalTime
    node: object
    kind: str
    local: Optional[LocalTicks] = None
    detail: Tuple[Tuple[str, object], ...] = ()

    def get(self, key, default=None):
        for k, v in self.detail:
            if k == key:
                return v
        return default

    def to_dict(self) -> dict:
        out = {
            "seq": self.seq,
            "global_time_ns": self.time.to_ns(),
            "node": self.node,
            "kind": self.kind,
            "local_ticks": None if self.local is None else self.local.to_ns(),
        }
        for k, v in self.detail:
            out[k] = _plain(v)
        return out


def _plain(v):
    if isinstance(v, (GlobalTime, LocalTicks)):
        return v.to_ns()
    if isinstance(v, Fraction):
        return f"{v.numerator}/{v.denominator}"
    if isinstance(v, (list, tuple, frozenset, set)):
        return [_plain(x) for x in (sorted(v) if isinstance(v, (set, frozenset)) else v)]
    return v


@dataclass
class EventLog:
    records: List[LogRecord] = field(default_factory=list)
    incomplete: bool = False
    states: Dict[object, proto.SyncState] = field(default_factory=dict)

    def add(self, time, node, kind, local=None, **detail):
        self.records.append(LogRecord(len(self.records), time, node, kind, local, tuple(detail.items())))

    def of_kind(self, *kinds) -> List[LogRecord]:
        return [r for r in self.records if r.kind in kinds]

    def to_ndjson(self) -> str:
        return "".join(json.dumps(r.to_dict(), separators=(",", ":")) + "\n" for r in self.records)

    def __len__(self):
        return len(self.records)


@dataclass(frozen=True)
class _Deliver:
    msg: object
    sender: int
    link: str


@dataclass(frozen=True)
class _Timer:
    tag: str
    token: int


@dataclass(frozen=True)
class _Initiate:
    pass


class Simulator:
    """One run of one scenario; build, then call :meth:`run` once."""

    def __init__(self, scenario: "Scenario", seed: int, start_interval: Optional[int] = None,
                 run_key: str = ""):
        self.scenario = scenario
        self.seed = seed
        self.start_interval = start_interval
        self.key = run_key
        self.queue = EventQueue()
        self.log = EventLog()
        self.clocks: Dict[int, NodeClock] = {}
        self.states: Dict[int, proto.SyncState] = {}
        self.links = {l.name: l for l in scenario.links}
        self.link_rngs = {
            l.name: (substream(seed, f"{run_key}delay/{l.name}"), substream(seed, f"{run_key}loss/{l.name}"))
            for l in scenario.links
        }
        self._tokens: Dict[Tuple[int, str], int] = {}
        self._next_token = 0
        exp = scenario.experiment
        for n in scenario.nodes:
            self.clocks[n.id] = NodeClock(
                n.id, n.clock, substream(seed, f"{run_key}jitter/node{n.id}"), Fraction(n.offset_ns)
            )
            is_root = n.id == scenario.master
            cfg = proto.ProtocolConfig(
                sync_gap=exp.sync_gap,
                processing_delay=exp.processing_delay,
                m3_timeout=scenario.m3_timeout(),
                forward_delay=exp.processing_delay,
                settle=scenario.settle() if is_root else None,
                start_interval=start_interval if is_root else None,
            )
            kids = scenario.children(n.id)
            self.states[n.id] = proto.new_state(
                n.id, None if is_root else n.parent, kids, scenario.active_child(n.id), cfg
            )

    def run(self) -> EventLog:
        t0 = GlobalTime(0)
        horizon = GlobalTime(self.scenario.horizon(self.start_interval or 0))
        for n in self.scenario.nodes:
            self.log.add(t0, n.id, "node", role=self.scenario.role(n.id), clock=n.clock_name)
        self.queue.push(t0, self.scenario.master, _Initiate())
        while self.queue:
            if self.queue.peek_time() > horizon:
                break
            now, node, event = self.queue.pop()
            self._handle(now, node, event)
        pending_fire = any(
            isinstance(e, _Timer) and e.tag == "fire" for e in self.queue.pending()
        )
        if pending_fire:
            self.log.incomplete = True
            self.log.add(horizon, None, "incomplete", reason="fire timers pending at horizon")
        self.log.states = dict(self.states)
        return self.log

    def _handle(self, now: GlobalTime, node: int, event) -> None:
        if isinstance(event, _Timer):
            if self._tokens.get((node, event.tag)) != event.token:
                return
            del self._tokens[(node, event.tag)]
        state = self.states[node]
        local = self.clocks[node].read(now)
        if isinstance(event, _Initiate):
            gap = LocalTicks(node, state.config.sync_gap)
            new, actions = proto.initiate_sync(state, state.active_child, gap, local)
        elif isinstance(event, _Deliver):
            self.log.add(now, node, "recv", local, msg=proto.kind(event.msg),
                         session=list(event.msg.session), sender=event.sender, link=event.link)
            new, actions = proto.on_message(state, event.msg, local)
        elif isinstance(event, _Timer):
            new, actions = proto.on_timer(state, event.tag, local)
        else:
            raise TypeError(event)
        if new.role is not state.role:
            self.log.add(now, node, "role", local, old=state.role.value, new=new.role.value)
        self.states[node] = new
        for action in actions:
            self._apply(now, node, local, action)

    def _apply(self, now, node, local, action) -> None:
        if isinstance(action, proto.Send):
            self._send(now, node, local, action)
        elif isinstance(action, proto.SetTimer):
            token = self._next_token
            self._next_token += 1
            self._tokens[(node, action.tag)] = token
            self.queue.push(now + self.clocks[node].timer(action.delay), node, _Timer(action.tag, token))
            self.log.add(now, node, "arm", local, tag=action.tag, delay=action.delay)
        elif isinstance(action, proto.Fire):
            self.log.add(now, node, "fire", local, deadline=action.deadline)
        elif isinstance(action, proto.Synced):
            self.log.add(now, node, "synced", local, session=list(action.session),
                         c_drift=action.c_drift, t_propagation=action.T_propagation)
        elif isinstance(action, proto.Miss):
            self.log.add(now, node, "miss", local, reason=action.reason)
        elif isinstance(action, proto.Abort):
            self.log.add(now, node, "abort", local,
                         session=None if action.session is None else list(action.session),
                         reason=action.reason)
        elif isinstance(action, proto.Dropped):
            self.log.add(now, node, "drop", local, msg=proto.kind(action.msg), reason=action.reason)
        else:
            raise TypeError(action)

    def _send(self, now, node, local, action: proto.Send) -> None:
        links = [
            l for l in self.scenario.links
            if node in l.endpoints and any(a in l.endpoints for a in action.audience)
        ]
        msg = action.msg
        self.log.add(now, node, "send", local, msg=proto.kind(msg), session=list(msg.session),
                     links=[l.name for l in links], **_payload(msg))
        for link in links:
            delay_rng, loss_rng = self.link_rngs[link.name]
            for receiver, arrival in deliver(link, msg, node, now, delay_rng, loss_rng):
                if arrival is None:
                    self.log.add(now, receiver, "lost", msg=proto.kind(msg),
                                 session=list(msg.session), sender=node, link=link.name)
                else:
                    self.queue.push(arrival, receiver, _Deliver(msg, node, link.name))


def _payload(msg) -> dict:
    if isinstance(msg, proto.M1):
        return {"active": msg.active}
    if isinstance(msg, proto.M4):
        return {"T_i": msg.T_i, "T_a": msg.T_a}
    if isinstance(msg, proto.M5):
        return {"T_prop": msg.T_prop}
    if isinstance(msg, proto.Start):
        return {"interval": msg.interval}
    return {}


def run(scenario: "Scenario", seed: int, start_interval: Optional[int] = None,
        run_key: str = "") -> EventLog:
    """Simulate one synchronization and, if ``start_interval`` is set, one Start."""
    if not scenario.nodes:
        return EventLog()
    return Simulator(scenario, seed, start_interval, run_key).run()


@dataclass(frozen=True)
class Fires:
    fired: Dict[object, GlobalTime]
    never_fired: Tuple

    def __iter__(self):
        return iter(sorted(self.fired.items()))


def observe_fires(log: EventLog) -> Fires:
    nodes = [r.node for r in log.of_kind("node")]
    fired = {r.node: r.time for r in log.of_kind("fire")}
    return Fires(fired, tuple(n for n in nodes if n not in fired))
