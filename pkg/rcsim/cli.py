"""
Command line for running scenarios, re-checking traces and the fault matrix.

Exit status: 0 when every verdict passes (or is excused by an explicit
assumption breach), 1 on an invariant failure, 2 on usage or config errors.
"""
import argparse
import logging
import sys
from typing import List, Optional

from rcsim.config import configure_logging, get_settings
from rcsim.errors import ConfigError
from rcsim.models.scenario import AnalysisPolicy
from rcsim.models.trace import Verdict
from rcsim.services import harness
from rcsim.storage import read_trace, trace_digest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _analysis(text: str) -> str:
    try:
        AnalysisPolicy.parse(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rcsim", description="Hierarchical BFT consensus simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario and check its invariants")
    run.add_argument("--scenario", required=True, help="path to a YAML scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--trace", help="write the trace here (JSON lines)")
    run.add_argument("--policy", choices=["cm", "global"])
    run.add_argument("--analysis", type=_analysis, help="full | replication:R")

    verify = sub.add_parser("verify", help="re-check a saved trace")
    verify.add_argument("--trace", required=True)

    graph = sub.add_parser("graph", help="print the communication graph of a cycle")
    graph.add_argument("--trace", required=True)
    graph.add_argument("--cycle", type=int, required=True)

    matrix = sub.add_parser("matrix", help="run the F1..F16 fault suite")
    matrix.add_argument("--seeds", type=int)
    matrix.add_argument("--workers", type=int)

    serve = sub.add_parser("serve", help="serve the HTTP API")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=9000)
    return parser


def print_verdicts(verdicts: List[Verdict]) -> bool:
    ok = True
    for v in verdicts:
        if v.passed:
            status = "PASS"
        elif v.excused:
            status = "EXCUSED"
        else:
            status = "FAIL"
            ok = False
        line = f"{status:8} {v.invariant}"
        if not v.passed:
            line += f"  t={v.tick}  {v.witness}"
        print(line)
    return ok


def cmd_run(args: argparse.Namespace) -> int:
    scenario = harness.apply_overrides(harness.load_scenario(args.scenario), args.policy, args.analysis)
    result, _ = harness.run_result(scenario, args.seed, trace_path=args.trace)
    print(f"Scenario {result.scenario}  seed {result.seed}  policy {result.policy}  events {result.events}")
    ok = print_verdicts(result.verdicts)
    print(f"trace digest {result.trace_digest}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_verify(args: argparse.Namespace) -> int:
    events, recorded = read_trace(args.trace)
    ok = True
    if recorded is not None and recorded != trace_digest(events):
        print("FAIL     trace_digest  recorded digest does not match the events")
        ok = False
    return EXIT_OK if print_verdicts(harness.verify_trace(events)) and ok else EXIT_FAILED


def cmd_graph(args: argparse.Namespace) -> int:
    events, _ = read_trace(args.trace)
    adjacency = harness.comm_graph(events, args.cycle)
    if adjacency is None:
        print(f"No communication graph recorded for cycle {args.cycle}")
        return EXIT_FAILED
    print(f"Cycle {args.cycle}")
    for v, targets in adjacency.items():
        print(f"{v}: {', '.join(targets) if targets else '-'}")
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    rows = harness.run_matrix(seeds=args.seeds, workers=args.workers)
    print(f"{'Class':6} {'Scenario':28} {'Result':6}  Mitigation")
    print("-" * 90)
    for row in rows:
        print(f"{row.fault_class:6} {row.scenario:28} {'pass' if row.passed else 'FAIL':6}  {row.mitigation}")
        for failure in row.failures[:3]:
            print(f"{'':36}{failure}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_FAILED


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("rcsim.main:app", host=args.host, port=args.port)
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "verify": cmd_verify,
    "graph": cmd_graph,
    "matrix": cmd_matrix,
    "serve": cmd_serve,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    configure_logging(get_settings().log_level)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
