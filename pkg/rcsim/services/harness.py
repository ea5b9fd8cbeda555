"""
Scenario loading, world construction, fault injection and runs.

A Simulation builds every actor a scenario needs on one engine, wires the
scheduled faults, runs to the scenario's duration and hands the trace to
the oracle. The fault matrix runs the shipped F1..F16 scenarios over
several seeds, optionally in worker processes.
"""
import logging
import uuid
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic import ValidationError

from rcsim.config import get_settings
from rcsim.errors import ConfigError
from rcsim.models.scenario import BYZANTINE_CLASSES, NODE_BYZANTINE_CLASSES, Fault, Scenario
from rcsim.models.trace import MatrixRow, RunResult, TraceEvent, Verdict
from rcsim.services.bg_consensus import BGService, inject_byzantine
from rcsim.services.certs import crypto
from rcsim.services.client import ClientAgent
from rcsim.services.convergence import CMNode, CMRsm, ScriptedReporter
from rcsim.services.engine import Engine, TraceRecorder
from rcsim.services.global_service import GlobalService
from rcsim.services.layout import (
    Layout,
    bg_of,
    bg_service_id,
    cm_node_id,
    cycle_start,
    natural_key,
    sl_service_id,
)
from rcsim.services.node import Node
from rcsim.services.oracle import oracle_check
from rcsim.services.superleaf import SLService
from rcsim.storage.trace_store import trace_digest, write_trace

logger = logging.getLogger(__name__)

HARNESS_ID = "harness"
SCENARIO_DIR = Path(__file__).resolve().parents[2] / "scenarios"

MATRIX = {
    "F1": ("f01_node_crash_round1", "Atomic broadcast, batch timers, one-cycle delay"),
    "F2": ("f02_emulator_crash", "Retry another emulator after a timeout"),
    "F3": ("f03_representative_crash", "Promote a live node to representative"),
    "F4": ("f04_monitor_crash", "Promote another node to monitor"),
    "F5": ("f05_tx_numbering_attack", "Order on hashes of the transactions, not node numbering"),
    "F6": ("f06_silent_emulators", "Retry another emulator after a timeout"),
    "F7": ("f07_node_ignores_client", "Client retries at f_i + 1 distinct SLs"),
    "F8": ("f08_emulator_lying", "Responses carry a quorum certificate"),
    "F9": ("f09_sl_crash", "BFT agreement tolerates f_i SL crashes"),
    "F10": ("f10_sl_partition", "Quorum side stays live, minority stalls"),
    "F11": ("f11_sl_byzantine", "Responses carry a quorum certificate"),
    "F12": ("f12_bg_crash", "Global agreement excludes the failed BG"),
    "F13": ("f13_bg_partition", "BFT within the BG, minority side stalls"),
    "F14": ("f14_bg_leader_failure", "Global BFT agreement survives the leader"),
    "F15": ("f15_system_partition", "Super-majority excludes the minority BGs"),
    "F16": ("f16_early_exit", "One-cycle delay before commitment"),
}


# ---------------------------------------------------------------------------
# Scenario documents
# ---------------------------------------------------------------------------

def _line_of(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the YAML node at a validation error location"""
    try:
        node = yaml.compose(text)
    except yaml.YAMLError:
        return None
    line = None
    for part in loc:
        if isinstance(node, yaml.MappingNode):
            match = next((v for k, v in node.value if k.value == str(part)), None)
            key = next((k for k, _ in node.value if k.value == str(part)), None)
            if match is None:
                break
            line = key.start_mark.line + 1
            node = match
        elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
            node = node.value[part]
            line = node.start_mark.line + 1
        else:
            break
    return line


def parse_scenario(text: str, source: str = "<scenario>") -> Scenario:
    """
    Parse a YAML (or JSON) scenario document.

    Raises:
        ConfigError: on syntax errors (with the line) or invalid fields (with the field path)
    """
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError(f"{source}: invalid YAML", line=mark.line + 1 if mark else None)
    if not isinstance(document, dict):
        raise ConfigError(f"{source}: a scenario must be a mapping")
    try:
        return Scenario.model_validate(document)
    except ValidationError as e:
        error = e.errors()[0]
        loc = [part for part in error["loc"]]
        raise ConfigError(
            f"{source}: {error['msg']}",
            field=".".join(str(p) for p in loc) or None,
            line=_line_of(text, loc),
        )


def load_scenario(path: Union[str, Path]) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Scenario file {path} not found", field="scenario")
    return parse_scenario(path.read_text(encoding="utf-8"), source=str(path))


def shipped_scenario(name: str, directory: Path = SCENARIO_DIR) -> Scenario:
    path = directory / f"{name}.yaml"
    if not path.exists():
        raise ConfigError(f"No shipped scenario named '{name}'", field="scenario")
    return load_scenario(path)


def list_scenarios(directory: Path = SCENARIO_DIR) -> List[str]:
    return sorted(p.stem for p in directory.glob("*.yaml"))


def apply_overrides(
    scenario: Scenario, policy: Optional[str] = None, analysis: Optional[str] = None
) -> Scenario:
    """Re-validate a scenario with the policy or analysis replaced"""
    if policy is None and analysis is None:
        return scenario
    document = scenario.model_dump(mode="json", by_alias=True)
    if policy is not None:
        document["policy"]["mode"] = policy
    if analysis is not None:
        document["policy"]["analysis"] = analysis
    try:
        return Scenario.model_validate(document)
    except ValidationError as e:
        error = e.errors()[0]
        raise ConfigError(error["msg"], field=".".join(str(p) for p in error["loc"]) or None)


def resolve_seed(scenario: Scenario, seed: Optional[int] = None) -> int:
    """Explicit seed, else RCSIM_SEED, else the scenario's own"""
    if seed is not None:
        return seed
    env_seed = get_settings().seed
    return env_seed if env_seed is not None else scenario.seed


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

class Simulation:
    """One fully wired simulated system"""

    def __init__(self, scenario: Scenario, seed: Optional[int] = None):
        self.scenario = scenario
        self.seed = resolve_seed(scenario, seed)
        crypto.use(get_settings().signer)
        self.layout = Layout(scenario.topology)
        self.recorder = TraceRecorder()
        self.engine = Engine(self.seed, scenario.timing, self.recorder)
        self.nodes: Dict[str, Node] = {}
        self.clients: List[ClientAgent] = []
        self.started = False
        self.recorder.record(
            0,
            "run_start",
            HARNESS_ID,
            scenario=scenario.model_dump(mode="json", by_alias=True),
            seed=self.seed,
        )
        if scenario.script is not None:
            self._build_scripted()
        else:
            self._build()
        self._schedule_faults()

    def _build(self) -> None:
        scenario = self.scenario
        layout = self.layout
        timing = scenario.timing
        policy = scenario.policy
        for node_id in layout.all_nodes():
            self.nodes[node_id] = self.engine.register(Node(node_id, layout, timing, policy), physical=True)
        for bg in layout.all_bgs:
            for sl in layout.sls[bg]:
                self.engine.register(SLService(sl, layout, timing))
            self.engine.register(BGService(bg, layout, timing, policy))
        self.engine.register(GlobalService(layout, timing, policy))
        if policy.mode == "cm":
            replicas = [cm_node_id(bg) for bg in layout.all_bgs]
            for bg in layout.all_bgs:
                self.engine.register(CMNode(bg, layout, timing, policy, replicas))
            self.engine.register(CMRsm(layout, timing, policy, replicas))
        stop_at = cycle_start(scenario.cycles, timing.batch) + timing.batch
        for i in range(scenario.clients.count):
            bg = layout.initial_bgs[i % len(layout.initial_bgs)]
            sls = layout.sls[bg]
            sl = sls[(i // len(layout.initial_bgs)) % len(sls)]
            client = ClientAgent(
                f"C{i + 1}",
                bg,
                sl,
                layout,
                scenario.clients,
                timing,
                stop_at,
                equivocating=i < scenario.clients.equivocating,
            )
            self.clients.append(self.engine.register(client))

    def _build_scripted(self) -> None:
        script = self.scenario.script
        hosts = sorted({bg for entry in script.cycles for bg in entry.members}, key=natural_key)
        unknown = [bg for bg in hosts if bg not in self.layout.all_bgs]
        if unknown:
            raise ConfigError(f"Script names BGs outside the topology: {unknown}", field="script")
        replicas = [cm_node_id(bg) for bg in hosts]
        reporter = ScriptedReporter(script, self.scenario.timing, replicas)
        self.engine.register(reporter)
        for bg in hosts:
            self.engine.register(
                CMNode(
                    bg,
                    self.layout,
                    self.scenario.timing,
                    self.scenario.policy,
                    replicas,
                    members_for=reporter.members_for,
                    scripted=True,
                )
            )
        self.engine.register(
            CMRsm(
                self.layout,
                self.scenario.timing,
                self.scenario.policy,
                replicas,
                members_for=reporter.members_for,
                scripted=True,
            )
        )

    # -- faults -----------------------------------------------------------

    def fault_time(self, fault: Fault) -> int:
        if fault.at is not None:
            return fault.at
        return cycle_start(fault.cycle, self.scenario.timing.batch) + fault.offset

    def fault_until(self, fault: Fault) -> Optional[int]:
        if fault.until is not None:
            return fault.until
        if fault.until_cycle is not None:
            return cycle_start(fault.until_cycle, self.scenario.timing.batch)
        return None

    def resolve_nodes(self, target: str) -> List[str]:
        """Physical nodes named by a node, SL or BG id"""
        layout = self.layout
        if target in self.nodes:
            return [target]
        if target in layout.nodes:
            return list(layout.nodes[target])
        if target in layout.sls:
            return layout.bg_nodes(target)
        raise ConfigError(f"Unknown fault target '{target}'", field="faults.target")

    def _role_target(self, fault: Fault) -> List[str]:
        """Resolve role-based crash targets at the moment the fault fires"""
        target = fault.target
        if target in self.nodes:
            return [target]
        if fault.fault_class in ("F3", "F4"):
            roles = self.engine.actors[sl_service_id(target)].roles
            if roles is None:
                return self.resolve_nodes(target)[:1]
            if fault.fault_class == "F4":
                return [roles.monitor]
            return list(roles.representatives[:1]) or [roles.monitor]
        if fault.fault_class == "F14":
            leader = self.engine.actors[bg_service_id(target)].leader
            return [leader] if leader else self.resolve_nodes(target)[:1]
        return self.resolve_nodes(target)

    def _schedule_faults(self) -> None:
        for sl_id, behaviors in sorted(self.scenario.byzantine.items()):
            if not sl_id.startswith("CM."):
                self.resolve_nodes(sl_id)
            for behavior in behaviors:
                self.engine.call_at(0, self._byzantine(sl_id, behavior), "byzantine")
        for fault in self.scenario.faults:
            if fault.target is None and fault.fault_class not in ("F10", "F13", "F15"):
                raise ConfigError(f"{fault.fault_class} needs a target", field="faults.target")
            at = self.fault_time(fault)
            until = self.fault_until(fault)
            cls = fault.fault_class
            if cls in ("F10", "F13", "F15"):
                self.engine.set_partition(fault.components, at, until)
                self.engine.call_at(at, self._note(fault, []), cls)
            elif cls == "F16":
                self._arm_early_exit(fault)
            elif cls in BYZANTINE_CLASSES or cls in NODE_BYZANTINE_CLASSES or cls == "F11":
                behavior = fault.behavior or BYZANTINE_CLASSES.get(cls) or NODE_BYZANTINE_CLASSES[cls]
                self.engine.call_at(at, self._byzantine(fault.target, behavior, fault), cls)
            else:
                self.resolve_nodes(fault.target)
                self.engine.call_at(at, self._crash(fault), cls)

    def _note(self, fault: Fault, affected: List[str]) -> Callable[[], None]:
        def note() -> None:
            self.recorder.record(
                self.engine.now,
                "fault",
                HARNESS_ID,
                peer=fault.target,
                fault_class=fault.fault_class,
                target=fault.target,
                affected=affected,
            )

        return note

    def _byzantine(self, target: str, behavior: str, fault: Optional[Fault] = None) -> Callable[[], None]:
        def corrupt() -> None:
            touched = inject_byzantine(self.engine, self.layout, target, behavior)
            if fault is not None:
                self._note(fault, touched)()

        return corrupt

    def _crash(self, fault: Fault) -> Callable[[], None]:
        def crash() -> None:
            victims = [n for n in self._role_target(fault) if not self.nodes[n].crashed]
            self._note(fault, victims)()
            for node_id in victims:
                self.nodes[node_id].crash()
            if fault.recover_at is not None and victims:
                self.engine.call_at(max(fault.recover_at, self.engine.now), self._recover(victims), "recover")

        return crash

    def _recover(self, victims: List[str]) -> Callable[[], None]:
        def recover() -> None:
            self.recorder.record(self.engine.now, "recover", HARNESS_ID, affected=victims)
            for node_id in victims:
                self.nodes[node_id].recover()

        return recover

    def _arm_early_exit(self, fault: Fault) -> None:
        """Kill a whole BG right after one of its nodes completes the fault's cycle"""
        target_bg = bg_of(fault.target)
        cycle = fault.cycle
        if cycle is None:
            raise ConfigError("F16 needs a cycle", field="faults.cycle")
        fired = []

        def trigger(event: TraceEvent) -> None:
            if fired or event.kind != "complete" or event.data.get("cycle") != cycle:
                return
            if event.actor in self.nodes and bg_of(event.actor) == target_bg:
                fired.append(event.tick)
                self.engine.call_at(self.engine.now, self._crash(fault), "F16")

        self.recorder.on_event(trigger)

    # -- running ----------------------------------------------------------

    def start(self) -> None:
        if self.started:
            return
        self.started = True
        for actor in list(self.engine.actors.values()):
            start = getattr(actor, "start", None)
            if start is not None:
                start()

    def run(self, until: Optional[int] = None) -> List[TraceEvent]:
        """Run to the scenario's duration (or a given tick) and return the trace"""
        self.start()
        end = until if until is not None else self.scenario.total_ticks
        self.engine.run_until(end)
        if until is None:
            self.recorder.record(
                self.engine.now,
                "run_end",
                HARNESS_ID,
                delivered=self.engine.delivered,
                dropped=self.engine.dropped,
                fifo_violations=self.engine.fifo_violations,
                cycles=self.scenario.cycles,
            )
        return self.recorder.events


def run(scenario: Scenario, seed: Optional[int] = None) -> Tuple[List[TraceEvent], List[Verdict]]:
    """Execute a scenario to its duration and check every invariant"""
    simulation = Simulation(scenario, seed)
    logger.info("Running %s with seed %d", scenario.name, simulation.seed)
    events = simulation.run()
    return events, oracle_check(events, scenario)


def scenario_from_trace(events: Sequence[TraceEvent]) -> Scenario:
    """Recover the scenario recorded at the head of a trace"""
    head = next((e for e in events if e.kind == "run_start"), None)
    if head is None:
        raise ConfigError("Trace has no run_start record", field="trace")
    return Scenario.model_validate(head.data["scenario"])


def verify_trace(events: List[TraceEvent]) -> List[Verdict]:
    return oracle_check(events, scenario_from_trace(events))


def run_result(
    scenario: Scenario,
    seed: Optional[int] = None,
    trace_path: Optional[Union[str, Path]] = None,
) -> Tuple[RunResult, List[TraceEvent]]:
    """Run a scenario and package the outcome, writing the trace if asked"""
    simulation = Simulation(scenario, seed)
    events = simulation.run()
    verdicts = oracle_check(events, scenario)
    digest = write_trace(trace_path, events) if trace_path else trace_digest(events)
    result = RunResult(
        run_id=str(uuid.uuid4()),
        scenario=scenario.name,
        seed=simulation.seed,
        policy=f"{scenario.policy.mode}/{scenario.policy.analysis}",
        verdicts=verdicts,
        trace_digest=digest,
        events=len(events),
        assumption_breach=scenario.assumption_breach,
        trace_path=str(trace_path) if trace_path else None,
    )
    return result, events


def comm_graph(events: Sequence[TraceEvent], cycle: int) -> Optional[Dict[str, List[str]]]:
    """Adjacency list the CM analyzed for a cycle (who received whose input)"""
    for event in events:
        if event.kind == "cm_graph" and event.data.get("cycle") == cycle:
            return {v: sorted(ws, key=natural_key) for v, ws in event.data["adjacency"].items()}
    return None


# ---------------------------------------------------------------------------
# Fault matrix
# ---------------------------------------------------------------------------

def matrix_scenarios(directory: Path = SCENARIO_DIR) -> Dict[str, Path]:
    paths = {}
    for cls, (stem, _) in MATRIX.items():
        path = directory / f"{stem}.yaml"
        if not path.exists():
            raise ConfigError(f"Matrix scenario {path} is missing", field="scenario")
        paths[cls] = path
    return paths


def _matrix_job(path: str, seed: int) -> RunResult:
    result, _ = run_result(load_scenario(path), seed)
    return result


def run_matrix(
    seeds: Optional[int] = None,
    workers: Optional[int] = None,
    classes: Optional[Sequence[str]] = None,
    directory: Path = SCENARIO_DIR,
) -> List[MatrixRow]:
    """Run the F1..F16 suite; each row passes when every seed passes"""
    settings = get_settings()
    seeds = seeds or settings.matrix_seeds
    workers = workers or settings.matrix_workers
    paths = matrix_scenarios(directory)
    selected = [c for c in MATRIX if classes is None or c in classes]
    jobs: List[Tuple[str, str, int]] = []
    for cls in selected:
        base = load_scenario(paths[cls]).seed
        jobs.extend((cls, str(paths[cls]), base + i) for i in range(seeds))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_matrix_job, [j[1] for j in jobs], [j[2] for j in jobs]))
    else:
        results = [_matrix_job(path, seed) for _, path, seed in jobs]
    rows = []
    for cls in selected:
        mine = [r for (c, _, _), r in zip(jobs, results) if c == cls]
        failures = [
            f"seed {r.seed}: {v.invariant} ({v.witness})" for r in mine for v in r.verdicts if not (v.passed or v.excused)
        ]
        rows.append(
            MatrixRow(
                fault_class=cls,
                scenario=MATRIX[cls][0],
                mitigation=MATRIX[cls][1],
                seeds=[r.seed for r in mine],
                passed=not failures,
                failures=failures,
            )
        )
        logger.info("%s %s", cls, "pass" if not failures else "FAIL")
    return rows
