"""Scenario builders shared by the test modules."""
from __future__ import annotations

import random
from fractions import Fraction

from evsync.clockmodel import NS_PER_MS, ClockModel
from evsync.netsim import LinkModel
from evsync.scenario import Experiment, NodeSpec, Scenario

MS = NS_PER_MS
US = 1_000


def ideal(drift=1, jitter=0, resolution=1) -> ClockModel:
    return ClockModel(Fraction(drift), jitter, resolution)


def wired(a, b, delay, reverse=None, name=None) -> LinkModel:
    return LinkModel("wired", (a, b), (delay, delay), Fraction(0), reverse, name or f"w{a}-{b}")


def radio(endpoints, lo, hi=None, loss=0, name=None) -> LinkModel:
    hi = lo if hi is None else hi
    return LinkModel("wireless", tuple(endpoints), (lo, hi), Fraction(loss), None,
                     name or "r" + "-".join(map(str, endpoints)))


def build(parents: dict, links, clocks: dict | None = None, master=0, active=(),
          offsets: dict | None = None, **experiment) -> Scenario:
    """``parents`` maps node id to parent id (None for the master)."""
    clocks = clocks or {}
    offsets = offsets or {}
    nodes = tuple(
        NodeSpec(i, clocks.get(i, ideal()), "inline", p, i in active, "", offsets.get(i, 0))
        for i, p in sorted(parents.items())
    )
    exp = dict(start_intervals=(500 * MS,), repetitions=1, sync_gap=100 * MS)
    exp.update(experiment)
    return Scenario(nodes, tuple(links), master, Experiment(**exp))


def single_hop(slave_drift=1, delay=2 * MS, master_drift=1, **experiment) -> Scenario:
    return build({0: None, 1: 0}, [radio([0, 1], delay)],
                 {0: ideal(master_drift), 1: ideal(slave_drift)}, **experiment)


def star(n_passive: int, delay=2 * MS, **experiment) -> Scenario:
    ids = range(n_passive + 2)
    return build({i: (None if i == 0 else 0) for i in ids}, [radio(list(ids), delay)], **experiment)


def random_exact_scenario(rng: random.Random, max_depth: int = 3) -> Scenario:
    """Zero-jitter tree, 1..max_depth hops, constant symmetric delays.

    Each parent reaches its children over one link: wireless when there are
    several children, wired or wireless when there is one.
    """
    depth = rng.randint(1, max_depth)
    parents = {0: None}
    links = []
    frontier, next_id = [0], 1
    for level in range(depth):
        relays = frontier if level == 0 else rng.sample(frontier, rng.randint(1, len(frontier)))
        new = []
        for p in relays:
            kids = list(range(next_id, next_id + rng.randint(1, 3)))
            next_id += len(kids)
            for k in kids:
                parents[k] = p
            delay = rng.randint(10 * US, 5 * MS)
            if len(kids) == 1 and rng.random() < 0.5:
                links.append(wired(p, kids[0], delay))
            else:
                links.append(radio([p] + kids, delay))
            new.extend(kids)
        frontier = new
    clocks = {i: ideal(Fraction(rng.randint(98_001, 102_999), 100_000)) for i in parents}
    offsets = {i: rng.randint(0, 10**12) for i in parents}
    active = {rng.choice([k for k, p in parents.items() if p == q])
              for q in set(parents.values()) if q is not None}
    return build(parents, links, clocks, active=active, offsets=offsets,
                 start_intervals=(rng.randint(100, 800) * MS,),
                 sync_gap=rng.randint(20, 200) * MS,
                 processing_delay=rng.randint(100 * US, 2 * MS))
