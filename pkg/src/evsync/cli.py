"""Command-line entry point.

Exit codes: 0 success, 1 domain failure (invalid scenario, output
collision), 2 usage or parse failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from . import harness
from .clockmodel import NS_PER_MS
from .scenario import CANONICAL, Scenario, ScenarioParseError, load_scenario, validate, with_experiment

log = logging.getLogger("evsync")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2

REPRODUCE_FILES = ("table3.csv", "fig5.csv", "fig6.csv")
DEEP_INTERVAL = 500 * NS_PER_MS


class OutputCollision(Exception):
    pass


def _load(args) -> Scenario:
    scenario = load_scenario(args.scenario)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "reps", None) is not None:
        changes["repetitions"] = args.reps
    return with_experiment(scenario, **changes) if changes else scenario


def _writer(out: Optional[str], force: bool, names) -> Dict[str, Path]:
    """Target paths for ``names`` under ``out``; refuse to clobber without force."""
    outdir = Path(out)
    paths = {n: outdir / n for n in names}
    clash = [str(p) for p in paths.values() if p.exists()]
    if clash and not force:
        raise OutputCollision("refusing to overwrite (use --force): " + ", ".join(clash))
    outdir.mkdir(parents=True, exist_ok=True)
    return paths


def cmd_validate(args) -> int:
    scenario = load_scenario(args.scenario)
    problems = validate(scenario)
    for p in problems:
        print(f"{args.scenario}: {p}")
    if not problems:
        print(f"{args.scenario}: ok ({len(scenario.nodes)} nodes, {len(scenario.links)} links)")
    return EXIT_DOMAIN if problems else EXIT_OK


def _labels(scenario: Scenario):
    return {n.id: n.name for n in scenario.nodes}


def cmd_run(args) -> int:
    scenario = _load(args)
    results = list(harness.iter_runs(scenario))
    records = [r for res in results for r in res.records]
    summary = harness.summary_csv(harness.summarize(records, "node", labels=_labels(scenario)))
    if args.out is None:
        sys.stdout.write(summary)
        return EXIT_OK
    paths = _writer(args.out, args.force, ("records.csv", "summary.csv", "events.ndjson"))
    paths["records.csv"].write_text(harness.records_csv(records))
    paths["summary.csv"].write_text(summary)
    with paths["events.ndjson"].open("w") as fh:
        for res in results:
            for rec in res.log.records:
                fh.write(json.dumps({"run": res.run, **rec.to_dict()}, separators=(",", ":")) + "\n")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_sweep(args) -> int:
    scenario = _load(args)
    records = harness.run_experiment(scenario)
    summary = harness.summary_csv(harness.summarize(records, "start_interval"))
    if args.out is None:
        sys.stdout.write(summary)
        return EXIT_OK
    paths = _writer(args.out, args.force, ("records.csv", "sweep.csv"))
    paths["records.csv"].write_text(harness.records_csv(records))
    paths["sweep.csv"].write_text(summary)
    return EXIT_OK


def propagation_rows(scenario: Scenario, results) -> List[List[str]]:
    """Per run: the radio hop's and the first wired hop's propagation estimate, in ms."""
    radio_node = scenario.active_child(scenario.master)
    wired_node = None
    for n in sorted(scenario.nodes, key=lambda n: n.id):
        if n.parent is not None and n.id != scenario.master:
            link = scenario.hop_link(n.parent, n.id)
            if link is not None and link.kind == "wired" and scenario.role(n.id) == "active":
                wired_node = n.id
                break
    rows = []
    for res in results:
        est = {r.node: r.get("t_propagation") for r in res.log.of_kind("synced")}
        row = [str(res.run)]
        for node in (radio_node, wired_node):
            tp = est.get(node)
            row.append("" if tp is None else f"{tp.to_ns() / NS_PER_MS:.6f}")
        rows.append(row)
    return rows


def reproduce(scenario: Scenario, outdir, force: bool = False) -> Dict[str, Path]:
    paths = _writer(outdir, force, REPRODUCE_FILES)
    labels = _labels(scenario)

    sweep = harness.run_experiment(scenario)
    paths["fig5.csv"].write_text(harness.summary_csv(harness.summarize(sweep, "start_interval")))

    deep = list(harness.iter_runs(with_experiment(scenario, start_intervals=(DEEP_INTERVAL,))))
    records = [r for res in deep for r in res.records]
    paths["table3.csv"].write_text(
        harness.summary_csv(harness.summarize(records, "node", labels=labels))
    )
    lines = ["run,radio_ms,spi_ms"] + [",".join(r) for r in propagation_rows(scenario, deep)]
    paths["fig6.csv"].write_text("\n".join(lines) + "\n")
    return paths


def cmd_reproduce(args) -> int:
    scenario = _load(args)
    problems = validate(scenario)
    if problems:
        raise harness.InvalidScenario(problems)
    paths = reproduce(scenario, args.out, args.force)
    for p in paths.values():
        print(p)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evsync", description="Simulate on-demand event synchronization experiments."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario_required=True, out_default=None):
        if scenario_required:
            p.add_argument("--scenario", required=True, metavar="PATH")
        else:
            p.add_argument("--scenario", default=str(CANONICAL), metavar="PATH",
                           help="default: the shipped calibrated scenario")
        p.add_argument("--seed", type=int, default=None, help="override the scenario seed (default 0)")
        p.add_argument("--out", default=out_default, metavar="DIR")
        p.add_argument("--reps", type=int, default=None, help="override repetitions")
        p.add_argument("--force", action="store_true", help="overwrite existing output files")
        p.add_argument("-v", "--verbose", action="count", default=0)

    p = sub.add_parser("validate", help="check a scenario file")
    p.add_argument("--scenario", required=True, metavar="PATH")
    p.add_argument("-v", "--verbose", action="count", default=0)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run a scenario; write records, summary and event logs")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a scenario over its start intervals; summarize per interval")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", help="regenerate table3.csv, fig5.csv and fig6.csv")
    common(p, scenario_required=False, out_default="reproduction")
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ScenarioParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except harness.InvalidScenario as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except OutputCollision as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
