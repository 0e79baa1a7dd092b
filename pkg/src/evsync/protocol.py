"""On-demand event synchronization as a pure, message-driven state machine.

Each node owns a :class:`SyncState`. The simulator (or any other driver)
feeds it messages and timer expirations through :func:`on_message` and
:func:`on_timer`; both return a new state plus a list of actions for the
driver to carry out. Nothing here reads a clock or touches shared state.

Per hop, one session is exactly five messages::

    parent --M1--> children          (t1 / t2)
    parent --M2--> children          (t3 / t4)
    active --M3--> parent            (after the processing delay)
    parent --M4{T_i, T_a}--> children
    active --M5{T_prop}--> parent and passive siblings

followed later by one Start per hop.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Tuple, Union

from .clockmodel import NS_PER_MS, LocalTicks

SessionId = Tuple[object, int]


class Role(enum.Enum):
    MASTER = "master"
    ACTIVE = "active"
    PASSIVE = "passive"
    UNSYNCED = "unsynced"


class ProtocolError(Exception):
    pass


class SessionBusy(ProtocolError):
    pass


class NegativePropagation(ProtocolError):
    pass


class EventAlreadyPassed(ProtocolError):
    pass


# -- messages -----------------------------------------------------------------

@dataclass(frozen=True)
class M1:
    session: SessionId
    active: object  # the slave chosen to answer with M3


@dataclass(frozen=True)
class M2:
    session: SessionId


@dataclass(frozen=True)
class M3:
    session: SessionId


@dataclass(frozen=True)
class M4:
    session: SessionId
    T_i: LocalTicks
    T_a: LocalTicks

    def __post_init__(self):
        if self.T_i.ticks <= 0 or self.T_a.ticks <= 0:
            raise ProtocolError("M4 intervals must be positive")


@dataclass(frozen=True)
class M5:
    session: SessionId
    T_prop: LocalTicks  # in the session initiator's clock units


@dataclass(frozen=True)
class Start:
    session: SessionId
    interval: LocalTicks  # in the sender's clock units


SyncMessage = Union[M1, M2, M3, M4, M5, Start]
SYNC_KINDS = ("M1", "M2", "M3", "M4", "M5")


def kind(msg: SyncMessage) -> str:
    return type(msg).__name__


# -- actions ------------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    msg: SyncMessage
    audience: frozenset


@dataclass(frozen=True)
class SetTimer:
    tag: str
    delay: LocalTicks


@dataclass(frozen=True)
class Fire:
    deadline: LocalTicks


@dataclass(frozen=True)
class Synced:
    session: SessionId
    c_drift: Fraction
    T_propagation: LocalTicks


@dataclass(frozen=True)
class Miss:
    reason: str


@dataclass(frozen=True)
class Abort:
    session: SessionId
    reason: str


@dataclass(frozen=True)
class Dropped:
    msg: SyncMessage
    reason: str


Action = Union[Send, SetTimer, Fire, Synced, Miss, Abort, Dropped]


# -- state --------------------------------------------------------------------

@dataclass(frozen=True)
class ProtocolConfig:
    """Node-local protocol constants, all in the node's own ticks (ns)."""

    sync_gap: int = 500 * NS_PER_MS
    processing_delay: int = 1 * NS_PER_MS
    m3_timeout: int = 60 * NS_PER_MS
    forward_delay: int = 1 * NS_PER_MS
    # Root only: after its session, wait ``settle`` then send Start.
    settle: Optional[int] = None
    start_interval: Optional[int] = None


@dataclass(frozen=True)
class SyncState:
    node: object
    parent: object = None
    children: Tuple = ()
    active_child: object = None
    config: ProtocolConfig = field(default_factory=ProtocolConfig)
    role: Role = Role.UNSYNCED

    # upstream session, as a slave of ``parent``
    session: Optional[SessionId] = None
    assigned: Optional[Role] = None
    t2: Optional[LocalTicks] = None
    t4: Optional[LocalTicks] = None
    t_recv_M2: Optional[LocalTicks] = None
    t_send_M3: Optional[LocalTicks] = None
    T_a_prime: Optional[LocalTicks] = None
    T_i_parent: Optional[LocalTicks] = None
    c_drift: Optional[Fraction] = None
    T_propagation: Optional[LocalTicks] = None

    # downstream session, as initiator toward ``children``
    own_seq: int = 0
    own_session: Optional[SessionId] = None
    own_phase: str = "idle"  # idle | m2_pending | await_m3 | done | aborted
    t_send_M1: Optional[LocalTicks] = None
    t_send_M2: Optional[LocalTicks] = None
    t_recv_M3: Optional[LocalTicks] = None
    T_i: Optional[LocalTicks] = None
    T_a: Optional[LocalTicks] = None

    armed_fire_time: Optional[LocalTicks] = None
    fired: bool = False
    dropped: int = 0

    @property
    def synced(self) -> bool:
        if self.role is Role.MASTER:
            return True
        return self.c_drift is not None and self.T_propagation is not None

    @property
    def busy(self) -> bool:
        return self.own_phase in ("m2_pending", "await_m3")


def new_state(node, parent=None, children=(), active_child=None,
              config: ProtocolConfig | None = None) -> SyncState:
    children = tuple(sorted(children))
    if children and active_child is None:
        active_child = children[0]
    return SyncState(
        node=node,
        parent=parent,
        children=children,
        active_child=active_child,
        config=config or ProtocolConfig(),
        role=Role.MASTER if parent is None else Role.UNSYNCED,
    )


# -- derived quantities ---------------------------------------------------------

def compute_drift(T_i_parent: LocalTicks, T_i_local: LocalTicks) -> Fraction:
    """Own ticks per parent tick, from the same interval seen on both clocks."""
    if T_i_parent.ticks <= 0 or T_i_local.ticks <= 0:
        raise ProtocolError("drift needs positive intervals")
    return T_i_local.ticks / T_i_parent.ticks


def compute_propagation(T_a_master: LocalTicks, T_a_prime_local: LocalTicks,
                        c_drift: Fraction) -> LocalTicks:
    """One-way delay in master units, assuming equal M2 and M3 delays.

    The slave's processing window is converted to master ticks before it is
    taken out of the master's round trip.
    """
    if c_drift <= 0:
        raise ProtocolError("c_drift must be positive")
    if T_a_master.ticks * c_drift < T_a_prime_local.ticks:
        raise NegativePropagation(
            f"processing window {T_a_prime_local!r} exceeds round trip {T_a_master!r}"
        )
    return LocalTicks(T_a_master.node, (T_a_master.ticks - T_a_prime_local.ticks / c_drift) / 2)


def compute_wait(interval_parent_units: LocalTicks, T_propagation: LocalTicks,
                 c_drift: Fraction, node=None) -> LocalTicks:
    remaining = interval_parent_units - T_propagation
    if remaining.ticks <= 0:
        raise EventAlreadyPassed(
            f"interval {interval_parent_units!r} does not exceed propagation {T_propagation!r}"
        )
    return LocalTicks(node, remaining.ticks * c_drift)


# -- transitions -----------------------------------------------------------------

def initiate_sync(state: SyncState, chosen_slave, gap: LocalTicks,
                  now_local: LocalTicks):
    if state.busy:
        raise SessionBusy(f"node {state.node!r} already runs session {state.own_session}")
    if gap.ticks <= 0:
        raise ValueError("gap must be positive")
    seq = state.own_seq + 1
    session = (state.node, seq)
    state = replace(
        state,
        own_seq=seq,
        own_session=session,
        own_phase="m2_pending",
        active_child=chosen_slave,
        t_send_M1=now_local,
        t_send_M2=None,
        t_recv_M3=None,
        T_i=None,
        T_a=None,
    )
    audience = frozenset(state.children)
    return state, [Send(M1(session, chosen_slave), audience), SetTimer("send_m2", gap)]


def run_session_as_relay(state: SyncState, now_local: LocalTicks):
    """Repeat the master's procedure one level down the hierarchy."""
    if not state.children:
        return state, []
    gap = LocalTicks(state.node, state.config.sync_gap)
    return initiate_sync(state, state.active_child, gap, now_local)


def send_start(state: SyncState, interval: LocalTicks, now_local: LocalTicks):
    """Root only: broadcast Start and arm the root's own timer."""
    if state.own_phase != "done":
        return state, [Miss("start requested before the session completed")]
    state = replace(state, armed_fire_time=now_local + interval)
    return state, [
        SetTimer("fire", interval),
        Send(Start(state.own_session, interval), frozenset(state.children)),
    ]


def forward_start(state: SyncState, now_local: LocalTicks) -> Start:
    """Start for this node's children, re-based to the moment of sending."""
    if state.armed_fire_time is None:
        raise ProtocolError("nothing armed to forward")
    interval = state.armed_fire_time - now_local
    if interval.ticks <= 0:
        raise EventAlreadyPassed("own fire time passed before forwarding")
    return Start(state.own_session, interval)


def _drop(state, msg, reason):
    return replace(state, dropped=state.dropped + 1), [Dropped(msg, reason)]


def _reset_upstream(state: SyncState, session=None, assigned=None) -> SyncState:
    return replace(
        state,
        role=Role.UNSYNCED if state.parent is not None else state.role,
        session=session,
        assigned=assigned,
        t2=None, t4=None, t_recv_M2=None, t_send_M3=None, T_a_prime=None,
        T_i_parent=None, c_drift=None, T_propagation=None,
        armed_fire_time=None,
    )


def _maybe_complete(state: SyncState, now_local: LocalTicks, actions: list):
    if not state.synced or state.role is not Role.UNSYNCED:
        return state, actions
    state = replace(state, role=state.assigned)
    actions.append(Synced(state.session, state.c_drift, state.T_propagation))
    state, more = run_session_as_relay(state, now_local)
    return state, actions + more


def _fail(state: SyncState, reason: str):
    session = state.session
    return _reset_upstream(state), [Abort(session, reason)]


def on_message(state: SyncState, msg: SyncMessage, now_local: LocalTicks):
    """Pure transition for one received message."""
    if isinstance(msg, M3):
        return _master_on_m3(state, msg, now_local)
    if isinstance(msg, (M1, M2, M4, M5, Start)):
        if state.parent is None or msg.session[0] != state.parent:
            return _drop(state, msg, "not from parent")
        if isinstance(msg, M1):
            return _slave_on_m1(state, msg, now_local)
        if msg.session != state.session:
            return _drop(state, msg, "unknown session")
        handler = {M2: _slave_on_m2, M4: _slave_on_m4, M5: _slave_on_m5, Start: _on_start}
        return handler[type(msg)](state, msg, now_local)
    raise TypeError(f"not a protocol message: {msg!r}")


def _slave_on_m1(state, msg: M1, now):
    if msg.session == state.session:
        return _drop(state, msg, "duplicate M1")
    assigned = Role.ACTIVE if msg.active == state.node else Role.PASSIVE
    state = _reset_upstream(state, msg.session, assigned)
    return replace(state, t2=now), []


def _slave_on_m2(state, msg: M2, now):
    if state.t2 is None or state.t4 is not None:
        return _drop(state, msg, "M2 out of order")
    state = replace(state, t4=now, t_recv_M2=now)
    if state.assigned is Role.ACTIVE:
        return state, [SetTimer("reply_m3", LocalTicks(state.node, state.config.processing_delay))]
    return state, []


def _slave_on_m4(state, msg: M4, now):
    if state.t4 is None or state.c_drift is not None:
        return _drop(state, msg, "M4 out of order")
    if state.assigned is Role.ACTIVE and state.T_a_prime is None:
        return _drop(state, msg, "M4 before M3 was sent")
    try:
        c = compute_drift(msg.T_i, state.t4 - state.t2)
    except ProtocolError as exc:
        return _fail(state, str(exc))
    state = replace(state, c_drift=c, T_i_parent=msg.T_i)
    actions: list = []
    if state.assigned is Role.ACTIVE:
        try:
            tp = compute_propagation(msg.T_a, state.T_a_prime, c)
        except ProtocolError as exc:
            return _fail(state, str(exc))
        state = replace(state, T_propagation=tp)
        actions.append(Send(M5(state.session, tp), frozenset([state.parent])))
    return _maybe_complete(state, now, actions)


def _slave_on_m5(state, msg: M5, now):
    if state.assigned is not Role.PASSIVE or state.T_propagation is not None:
        return _drop(state, msg, "M5 not expected")
    state = replace(state, T_propagation=msg.T_prop)
    return _maybe_complete(state, now, [])


def _on_start(state, msg: Start, now):
    if not state.synced or state.role is Role.UNSYNCED:
        return state, [Miss("start received while unsynced")]
    if state.armed_fire_time is not None:
        return _drop(state, msg, "duplicate Start")
    try:
        wait = compute_wait(msg.interval, state.T_propagation, state.c_drift, state.node)
    except EventAlreadyPassed as exc:
        return state, [Miss(str(exc))]
    state = replace(state, armed_fire_time=now + wait)
    actions: list = [SetTimer("fire", wait)]
    if state.children:
        if state.own_phase == "done":
            actions.append(SetTimer("forward_start", LocalTicks(state.node, state.config.forward_delay)))
        else:
            actions.append(Miss(f"children not synced (session {state.own_phase})"))
    return state, actions


def _master_on_m3(state, msg: M3, now):
    if msg.session != state.own_session or state.own_phase != "await_m3":
        return _drop(state, msg, "unexpected M3")
    T_a = now - state.t_send_M2
    state = replace(state, t_recv_M3=now, T_a=T_a, own_phase="done")
    actions: list = [Send(M4(state.own_session, state.T_i, T_a), frozenset(state.children))]
    cfg = state.config
    if state.parent is None and cfg.start_interval is not None:
        actions.append(SetTimer("start", LocalTicks(state.node, cfg.settle or 0)))
    return state, actions


def on_timer(state: SyncState, tag: str, now_local: LocalTicks):
    """Pure transition for one expired timer."""
    if tag == "send_m2":
        if state.own_phase != "m2_pending":
            return state, []
        T_i = now_local - state.t_send_M1
        state = replace(state, t_send_M2=now_local, T_i=T_i, own_phase="await_m3")
        return state, [
            Send(M2(state.own_session), frozenset(state.children)),
            SetTimer("m3_timeout", LocalTicks(state.node, state.config.m3_timeout)),
        ]
    if tag == "m3_timeout":
        if state.own_phase != "await_m3":
            return state, []
        return replace(state, own_phase="aborted"), [Abort(state.own_session, "M3 timeout")]
    if tag == "reply_m3":
        if state.assigned is not Role.ACTIVE or state.t_recv_M2 is None or state.t_send_M3 is not None:
            return state, []
        state = replace(state, t_send_M3=now_local, T_a_prime=now_local - state.t_recv_M2)
        return state, [Send(M3(state.session), frozenset([state.parent]))]
    if tag == "start":
        interval = LocalTicks(state.node, state.config.start_interval)
        return send_start(state, interval, now_local)
    if tag == "fire":
        if state.fired or state.armed_fire_time is None:
            return state, []
        return replace(state, fired=True), [Fire(state.armed_fire_time)]
    if tag == "forward_start":
        if not state.children or state.own_phase != "done":
            return state, []
        try:
            start = forward_start(state, now_local)
        except EventAlreadyPassed as exc:
            return state, [Miss(f"forward skipped: {exc}")]
        return state, [Send(start, frozenset(state.children))]
    raise ValueError(f"unknown timer {tag!r}")
