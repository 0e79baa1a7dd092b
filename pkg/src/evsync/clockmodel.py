"""Heterogeneous hardware clocks.

Two time axes live in the simulator and must never be confused:

* :class:`GlobalTime` is the simulator's ground truth, in nanoseconds.
* :class:`LocalTicks` is a reading of one node's own clock, in nominal
  nanoseconds of that clock. It carries the owning node's id and refuses
  arithmetic or comparison with another node's ticks.

Both hold exact rationals so that drift scaling never loses precision;
they are rounded to whole nanoseconds only when serialized.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Rational
from typing import Iterable, Sequence, Union

INT64_MAX = 2**63 - 1
INT64_MIN = -(2**63)

NS_PER_US = 1_000
NS_PER_MS = 1_000_000

Number = Union[int, Fraction]


class SimulationOverflow(ArithmeticError):
    """A time value left the signed 64-bit nanosecond range."""


class ClockMixingError(TypeError):
    """Ticks of two different nodes (or ticks and global time) were combined."""


class ConfigurationError(ValueError):
    pass


def round_half_away(x: Number) -> int:
    """Round a rational to the nearest integer, ties away from zero."""
    x = Fraction(x)
    q, r = divmod(abs(x.numerator), x.denominator)
    if 2 * r >= x.denominator:
        q += 1
    return q if x >= 0 else -q


def _checked(value: Number) -> Fraction:
    if isinstance(value, float):
        raise TypeError("time values must be exact (int or Fraction), not float")
    value = Fraction(value)
    if not INT64_MIN <= value <= INT64_MAX:
        raise SimulationOverflow(f"time value {float(value):.6g} ns outside int64 range")
    return value


class GlobalTime:
    """Ground-truth simulation time (or a duration on that axis), in ns."""

    __slots__ = ("ns",)

    def __init__(self, ns: Number = 0):
        self.ns = _checked(ns)

    @classmethod
    def ms(cls, value: Number) -> "GlobalTime":
        return cls(Fraction(value) * NS_PER_MS)

    def __add__(self, other: "GlobalTime") -> "GlobalTime":
        if not isinstance(other, GlobalTime):
            return _mixing(self, other, "+")
        return GlobalTime(self.ns + other.ns)

    def __sub__(self, other: "GlobalTime") -> "GlobalTime":
        if not isinstance(other, GlobalTime):
            return _mixing(self, other, "-")
        return GlobalTime(self.ns - other.ns)

    def _cmp_key(self, other):
        if not isinstance(other, GlobalTime):
            _mixing(self, other, "compare")
        return other.ns

    def __eq__(self, other):
        return isinstance(other, GlobalTime) and self.ns == other.ns

    def __hash__(self):
        return hash(("G", self.ns))

    def __lt__(self, other):
        return self.ns < self._cmp_key(other)

    def __le__(self, other):
        return self.ns <= self._cmp_key(other)

    def __gt__(self, other):
        return self.ns > self._cmp_key(other)

    def __ge__(self, other):
        return self.ns >= self._cmp_key(other)

    def to_ns(self) -> int:
        return round_half_away(self.ns)

    def __repr__(self):
        return f"GlobalTime({_fmt(self.ns)})"


class LocalTicks:
    """A reading (or duration) on one node's clock."""

    __slots__ = ("node", "ticks")

    def __init__(self, node, ticks: Number = 0):
        self.node = node
        self.ticks = _checked(ticks)

    @classmethod
    def ms(cls, node, value: Number) -> "LocalTicks":
        return cls(node, Fraction(value) * NS_PER_MS)

    def _same(self, other, op):
        if not isinstance(other, LocalTicks):
            _mixing(self, other, op)
        if other.node != self.node:
            raise ClockMixingError(
                f"cannot {op} ticks of node {self.node!r} and node {other.node!r}"
            )
        return other.ticks

    def __add__(self, other: "LocalTicks") -> "LocalTicks":
        return LocalTicks(self.node, self.ticks + self._same(other, "+"))

    def __sub__(self, other: "LocalTicks") -> "LocalTicks":
        return LocalTicks(self.node, self.ticks - self._same(other, "-"))

    def scale(self, factor: Number) -> "LocalTicks":
        return LocalTicks(self.node, self.ticks * Fraction(factor))

    def __eq__(self, other):
        return (
            isinstance(other, LocalTicks)
            and other.node == self.node
            and other.ticks == self.ticks
        )

    def __hash__(self):
        return hash(("L", self.node, self.ticks))

    def __lt__(self, other):
        return self.ticks < self._same(other, "compare")

    def __le__(self, other):
        return self.ticks <= self._same(other, "compare")

    def __gt__(self, other):
        return self.ticks > self._same(other, "compare")

    def __ge__(self, other):
        return self.ticks >= self._same(other, "compare")

    def to_ns(self) -> int:
        return round_half_away(self.ticks)

    def __repr__(self):
        return f"LocalTicks({self.node!r}, {_fmt(self.ticks)})"


def _mixing(a, b, op):
    raise ClockMixingError(f"cannot {op} {type(a).__name__} and {type(b).__name__}")


def _fmt(x: Fraction) -> str:
    return str(x.numerator) if x.denominator == 1 else f"{x.numerator}/{x.denominator}"


@dataclass(frozen=True)
class ClockModel:
    """Constant-rate drift plus bounded uniform per-event jitter.

    ``drift_factor`` is local ticks per true nanosecond. Jitter is drawn
    per timer or measurement, uniformly within ``jitter_bound_ppm`` of the
    timed duration, in whole nanoseconds.
    """

    drift_factor: Fraction = Fraction(1)
    jitter_bound_ppm: int = 0
    timer_resolution: int = 1_000
    rng_stream: str = "jitter"

    def __post_init__(self):
        object.__setattr__(self, "drift_factor", Fraction(self.drift_factor))
        if self.drift_factor <= 0:
            raise ConfigurationError("drift_factor must be > 0")
        if self.jitter_bound_ppm < 0:
            raise ConfigurationError("jitter_bound_ppm must be >= 0")
        if self.timer_resolution <= 0:
            raise ConfigurationError("timer_resolution must be > 0")

    @classmethod
    def from_ppm(cls, drift_ppm: Number = 0, jitter_ppm: int = 0,
                 resolution_ns: int = 1_000, rng_stream: str = "jitter") -> "ClockModel":
        return cls(1 + Fraction(drift_ppm) / 1_000_000, jitter_ppm, resolution_ns, rng_stream)

    @property
    def drift_ppm(self) -> Fraction:
        return (self.drift_factor - 1) * 1_000_000

    def jitter_bound(self, duration: Number) -> int:
        """Largest whole-ns jitter allowed for a duration of ``duration`` ns."""
        return int(abs(Fraction(duration)) * self.jitter_bound_ppm / 1_000_000)


def _jitter(model: ClockModel, duration: Fraction, rng: random.Random | None) -> int:
    bound = model.jitter_bound(duration)
    if bound == 0:
        return 0
    if rng is None:
        raise ConfigurationError("a jittering clock needs an rng stream")
    return rng.randint(-bound, bound)


def quantize(model: ClockModel, requested: Fraction) -> Fraction:
    """Floor a requested timer duration to the timer's resolution.

    A 1 ns resolution is the simulator's native granularity; there the
    sub-nanosecond remainder produced by drift scaling is kept exactly.
    """
    if model.timer_resolution == 1:
        return requested
    res = model.timer_resolution
    return Fraction((requested // res) * res)


def local_elapsed(model: ClockModel, true_interval: GlobalTime, node=None,
                  rng: random.Random | None = None) -> LocalTicks:
    """Ticks a node's clock advances while ``true_interval`` passes."""
    if not isinstance(true_interval, GlobalTime):
        raise ClockMixingError("local_elapsed takes a GlobalTime duration")
    if true_interval.ns < 0:
        raise ValueError("true_interval must be >= 0")
    nominal = true_interval.ns * model.drift_factor
    return LocalTicks(node, nominal + _jitter(model, nominal, rng))


def true_duration_of_timer(model: ClockModel, requested: LocalTicks,
                           rng: random.Random | None = None) -> GlobalTime:
    """Real time until a timer set for ``requested`` local ticks fires."""
    if not isinstance(requested, LocalTicks):
        raise ClockMixingError("true_duration_of_timer takes LocalTicks")
    if requested.ticks < 0:
        raise ValueError("requested must be >= 0")
    q = quantize(model, requested.ticks)
    nominal = q / model.drift_factor
    return GlobalTime(max(Fraction(0), nominal + _jitter(model, nominal, rng)))


def calibrate_from_table(rows: Iterable[Sequence[Number]], timer_resolution: int = 1_000,
                         rng_stream: str = "jitter") -> ClockModel:
    """Fit drift and jitter bound to (nominal, min, max) period measurements.

    Any consistent unit works; pass strings or Fractions for exact decimals.
    """
    rows = [tuple(Fraction(v) for v in row) for row in rows]
    if not rows:
        raise ConfigurationError("calibration table is empty")
    for nominal, lo, hi in rows:
        if nominal <= 0 or lo > hi:
            raise ConfigurationError(f"bad calibration row {(nominal, lo, hi)}")
    drift = sum(((lo + hi) / 2 / nominal for nominal, lo, hi in rows), Fraction(0)) / len(rows)
    jitter = max((hi - lo) / (2 * nominal) * 1_000_000 for nominal, lo, hi in rows)
    return ClockModel(drift, round_half_away(jitter), timer_resolution, rng_stream)


# Oscilloscope measurements in ms: (nominal period, min, max).
ATMEL48_TABLE = (
    ("0.2", "0.2045", "0.205"),
    ("2", "2.043", "2.047"),
    ("20", "20.439", "20.479"),
    ("40", "40.881", "40.959"),
    ("60", "61.578", "61.658"),
)
ISENSE_TABLE = (
    ("2", "2.000", "2.002"),
    ("4", "4.000", "4.002"),
    ("20", "19.938", "20.000"),
    ("40", "40.000", "40.000"),
)


def preset(name: str) -> ClockModel:
    if name == "atmel48":
        return calibrate_from_table(ATMEL48_TABLE, timer_resolution=1_000)
    if name == "isense":
        return calibrate_from_table(ISENSE_TABLE, timer_resolution=NS_PER_MS)
    if name == "ideal":
        return ClockModel(Fraction(1), 0, 1_000)
    raise ConfigurationError(f"unknown clock preset {name!r}")


PRESETS = ("atmel48", "isense", "ideal")


@dataclass
class NodeClock:
    """A node's running clock inside the simulator.

    Each reading advances from the previous one by :func:`local_elapsed`,
    so every measurement draws its own jitter.
    """

    node: object
    model: ClockModel
    rng: random.Random | None = None
    offset: Fraction = Fraction(0)
    _last_global: GlobalTime = field(default_factory=GlobalTime)
    _last_local: Fraction | None = None

    def read(self, now: GlobalTime) -> LocalTicks:
        if self._last_local is None:
            self._last_local = Fraction(self.offset) + now.ns * self.model.drift_factor
        elif now != self._last_global:
            step = local_elapsed(self.model, now - self._last_global, self.node, self.rng)
            self._last_local += step.ticks
        self._last_global = now
        return LocalTicks(self.node, self._last_local)

    def timer(self, requested: LocalTicks) -> GlobalTime:
        return true_duration_of_timer(self.model, requested, self.rng)
