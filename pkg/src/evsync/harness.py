"""Experiments over scenarios, error statistics and the closed-form oracle."""
from __future__ import annotations

import csv
import io
import logging
import statistics
from dataclasses import dataclass
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence

from . import netsim
from .clockmodel import NS_PER_MS, GlobalTime, round_half_away
from .scenario import Scenario, validate

log = logging.getLogger(__name__)

RECORD_COLUMNS = ("run", "start_interval_ms", "node", "role", "fired", "error_us", "abs_error_us")
SUMMARY_COLUMNS = ("group", "min_ms", "max_ms", "avg_ms", "stddev_ms", "misses")


class InvalidScenario(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.problems))


@dataclass(frozen=True)
class RunRecord:
    run: int
    start_interval: int  # ns
    node: int
    role: str
    fire: Optional[GlobalTime]
    error_ns: Optional[Fraction]  # fire - master fire, signed

    @property
    def fired(self) -> bool:
        return self.error_ns is not None

    @property
    def abs_error_ns(self) -> Optional[Fraction]:
        return None if self.error_ns is None else abs(self.error_ns)


@dataclass(frozen=True)
class RunResult:
    """Everything one repetition produced."""

    run: int
    start_interval: int
    records: List[RunRecord]
    log: netsim.EventLog


def run_key(interval_index: int, repetition: int) -> str:
    return f"i{interval_index}/r{repetition}/"


def records_from_log(scenario: Scenario, log_: netsim.EventLog, run: int,
                     start_interval: int) -> List[RunRecord]:
    fires = netsim.observe_fires(log_)
    master_fire = fires.fired.get(scenario.master)
    out = []
    for n in sorted(scenario.nodes, key=lambda n: n.id):
        fire = fires.fired.get(n.id)
        err = None
        if fire is not None and master_fire is not None:
            err = fire.ns - master_fire.ns
        out.append(RunRecord(run, start_interval, n.id, scenario.role(n.id), fire, err))
    return out


def iter_runs(scenario: Scenario, seed: Optional[int] = None):
    """Yield one :class:`RunResult` per (start interval, repetition), in order."""
    problems = validate(scenario)
    if problems:
        raise InvalidScenario(problems)
    exp = scenario.experiment
    seed = exp.seed if seed is None else seed
    run = 0
    for i, interval in enumerate(exp.start_intervals):
        for rep in range(exp.repetitions):
            log_ = netsim.run(scenario, seed, interval, run_key(i, rep))
            if log_.incomplete:
                log.warning("run %d (interval %s ms) hit the horizon", run, interval / NS_PER_MS)
            yield RunResult(run, interval, records_from_log(scenario, log_, run, interval), log_)
            run += 1


def run_experiment(scenario: Scenario, seed: Optional[int] = None) -> List[RunRecord]:
    """Fresh synchronization and one Start per interval x repetition."""
    out: List[RunRecord] = []
    for result in iter_runs(scenario, seed):
        out.extend(result.records)
    return out


@dataclass(frozen=True)
class SummaryRow:
    group: object
    n: int
    misses: int
    min_ms: Optional[float] = None
    max_ms: Optional[float] = None
    avg_ms: Optional[float] = None
    stddev_ms: Optional[float] = None

    @property
    def all_missed(self) -> bool:
        return self.n == 0


def summarize(records: Iterable[RunRecord], by: str = "node",
              exclude_master: bool = True, labels: Optional[Dict] = None) -> List[SummaryRow]:
    """Min, max, mean and population stddev of absolute error, per group.

    Misses never enter the statistics; they are counted per group.
    """
    if by not in ("node", "start_interval"):
        raise ValueError(f"cannot group by {by!r}")
    groups: Dict[object, List[RunRecord]] = {}
    for r in records:
        if exclude_master and r.role == "master":
            continue
        groups.setdefault(getattr(r, by), []).append(r)
    if not groups:
        raise ValueError("no records to summarize")
    rows = []
    for key in sorted(groups):
        recs = groups[key]
        errs = [float(r.abs_error_ns) / NS_PER_MS for r in recs if r.fired]
        misses = len(recs) - len(errs)
        group = key
        if by == "start_interval":
            group = _ms(key)
        elif labels and key in labels:
            group = labels[key]
        if not errs:
            rows.append(SummaryRow(group, 0, misses))
            continue
        rows.append(SummaryRow(
            group, len(errs), misses,
            min(errs), max(errs), statistics.fmean(errs), statistics.pstdev(errs),
        ))
    return rows


def _ms(ns) -> str:
    v = Fraction(ns) / NS_PER_MS
    return str(v.numerator) if v.denominator == 1 else f"{float(v):g}"


def _us(ns: Fraction) -> str:
    return f"{round_half_away(ns) / 1000:.3f}"


def records_csv(records: Iterable[RunRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_COLUMNS)
    for r in records:
        w.writerow([
            r.run, _ms(r.start_interval), r.node, r.role, int(r.fired),
            "" if r.error_ns is None else _us(r.error_ns),
            "" if r.error_ns is None else _us(r.abs_error_ns),
        ])
    return buf.getvalue()


def summary_csv(rows: Iterable[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for row in rows:
        if row.all_missed:
            w.writerow([row.group, "", "", "", "", row.misses])
        else:
            w.writerow([row.group] + [f"{v:.3f}" for v in
                                      (row.min_ms, row.max_ms, row.avg_ms, row.stddev_ms)] + [row.misses])
    return buf.getvalue()


# -- closed-form oracle -----------------------------------------------------------

class StochasticScenario(ValueError):
    pass


def _one_way(scenario: Scenario, sender: int, receiver: int) -> Fraction:
    link = scenario.hop_link(sender, receiver)
    lo, hi = link.one_way(sender, receiver)
    return Fraction(lo)


def analytic_oracle(scenario: Scenario, start_interval: int) -> Dict[int, GlobalTime]:
    """Exact fire instant of every node from ground-truth parameters alone.

    Only valid without jitter, loss or delay variation and with 1 ns timers.
    The root's fire instant follows from its own timers and the round trip
    to its active slave; each hop below adds half the difference between the
    Start's one-way delay and the active slave's round trip.
    """
    for n in scenario.nodes:
        if n.clock.jitter_bound_ppm or n.clock.timer_resolution != 1:
            raise StochasticScenario(f"node {n.id}: oracle needs zero jitter and 1 ns timers")
    for l in scenario.links:
        if not l.constant or l.loss_probability:
            raise StochasticScenario(f"link {l.name}: oracle needs constant, lossless delay")
    exp = scenario.experiment
    drift = {n.id: n.clock.drift_factor for n in scenario.nodes}
    m = scenario.master
    a = scenario.active_child(m)
    if a is None:
        t_start = Fraction(0)
    else:
        m2_sent = Fraction(exp.sync_gap) / drift[m]
        m3_sent = m2_sent + _one_way(scenario, m, a) + Fraction(exp.processing_delay) / drift[a]
        m4_sent = m3_sent + _one_way(scenario, a, m)
        t_start = m4_sent + Fraction(scenario.settle()) / drift[m]
    master_fire = t_start + Fraction(start_interval) / drift[m]

    out = {m: GlobalTime(master_fire)}
    pending = [m]
    while pending:
        parent = pending.pop()
        active = scenario.active_child(parent)
        if active is None:
            continue
        rtt_half = (_one_way(scenario, parent, active) + _one_way(scenario, active, parent)) / 2
        for child in scenario.children(parent):
            err = _one_way(scenario, parent, child) - rtt_half
            out[child] = GlobalTime(out[parent].ns + err)
            pending.append(child)
    return out
