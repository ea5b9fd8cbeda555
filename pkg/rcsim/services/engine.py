"""
Deterministic discrete-event engine.

Virtual time advances in ticks (1 tick = 1 ms). Events live in a heap keyed
by (time, sequence number), so two events at the same tick are dispatched
in the order they were scheduled. All randomness comes from one seeded
generator owned by the engine.

Messages between members of one SL take 1..delta ticks; all other messages
take 10..net_delay ticks. Delivery per ordered (src, dst) pair is FIFO. A
message whose delivery time falls inside an active partition that separates
its endpoints is dropped; one scheduled past the heal is delivered.
"""
import heapq
import logging
import random
import re
from collections import Counter
from typing import Any, Callable, Dict, Hashable, Iterable, List, Optional, Set, Tuple

from pydantic import BaseModel, ConfigDict, PrivateAttr

from rcsim.errors import ConfigError, LogicError
from rcsim.models.scenario import Timing
from rcsim.models.trace import TraceEvent

logger = logging.getLogger(__name__)

# location of actors that reach every component (clients)
ANYWHERE = "anywhere"
# location of every actor while no partition is active
UNIFIED = 0


class Envelope(BaseModel):
    """A message in flight"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    src: str
    dst: str
    payload: Any
    send_time: int
    deliver_time: int


class TimerEvent(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    actor: str
    name: str
    data: Any = None


class Callback(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    fn: Callable[[], None]
    label: str = ""


class Idle(BaseModel):
    """Returned by step() when nothing is queued"""
    model_config = ConfigDict(frozen=True)


IDLE = Idle()


class PartitionState(BaseModel):
    """Disjoint components active over [start, until)"""
    components: List[List[str]]
    start: int
    until: Optional[int] = None
    _placement: Dict[str, int] = PrivateAttr(default_factory=dict)

    def active(self, tick: int) -> bool:
        return self.start <= tick and (self.until is None or tick < self.until)


def ancestors(entity_id: str) -> List[str]:
    """An entity followed by its enclosing SL and BG ids"""
    parts = entity_id.split(".")
    return [".".join(parts[:i]) for i in range(len(parts), 0, -1)]


_SNAKE = re.compile(r"(?<=[a-z0-9])(?=[A-Z])|(?<=[A-Z])(?=[A-Z][a-z])")
_handler_names: Dict[type, str] = {}


def handler_name_for(cls: type) -> str:
    """`ReportToCM` -> `handle_report_to_cm`"""
    name = _handler_names.get(cls)
    if name is None:
        name = "handle_" + _SNAKE.sub("_", cls.__name__).lower()
        _handler_names[cls] = name
    return name


def handler_name(message: Any) -> str:
    return handler_name_for(type(message))


class TraceRecorder:
    """Collects trace events and notifies triggers"""

    def __init__(self):
        self.events: List[TraceEvent] = []
        self._triggers: List[Callable[[TraceEvent], None]] = []

    def on_event(self, trigger: Callable[[TraceEvent], None]) -> None:
        self._triggers.append(trigger)

    def record(
        self,
        tick: int,
        kind: str,
        actor: str,
        peer: Optional[str] = None,
        digest: Optional[bytes] = None,
        **data,
    ) -> TraceEvent:
        event = TraceEvent(
            tick=tick,
            kind=kind,
            actor=actor,
            peer=peer,
            digest=digest.hex() if digest is not None else None,
            data={k: _plain(v) for k, v in data.items()},
        )
        self.events.append(event)
        for trigger in self._triggers:
            trigger(event)
        return event


def _plain(value: Any) -> Any:
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, (list, tuple, set, frozenset)):
        items = [_plain(v) for v in value]
        return sorted(items) if isinstance(value, (set, frozenset)) else items
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in sorted(value.items())}
    return value


class Actor:
    """Base class for everything that sends or receives simulated messages"""

    sl_id: Optional[str] = None

    def __init__(self, actor_id: str):
        self.actor_id = actor_id
        self.crashed = False
        self.engine: Optional["Engine"] = None

    def attach(self, engine: "Engine") -> None:
        self.engine = engine

    @property
    def now(self) -> int:
        return self.engine.now

    def location(self) -> Optional[Hashable]:
        if self.crashed:
            return None
        return self.engine.place(self.actor_id)

    def send(self, dst: str, message: Any) -> None:
        if not self.crashed:
            self.engine.send(self.actor_id, dst, message)

    def set_timer(self, at: int, name: str, data: Any = None) -> None:
        self.engine.set_timer(self.actor_id, max(at, self.now), name, data)

    def trace(self, kind: str, peer: Optional[str] = None, digest: Optional[bytes] = None, **data) -> None:
        self.engine.recorder.record(self.now, kind, self.actor_id, peer, digest, **data)

    def deliver(self, src: str, message: Any) -> None:
        name = handler_name(message)
        handler = getattr(self, name, None)
        if handler is None:
            raise LogicError(f"{self.actor_id} has no {name} for {type(message).__name__} from {src}")
        handler(src, message)

    def fire(self, name: str, data: Any) -> None:
        getattr(self, f"timer_{name}")(data)

    def crash(self) -> None:
        self.crashed = True

    def recover(self) -> None:
        self.crashed = False


class Engine:
    """Single-threaded event loop over virtual time"""

    def __init__(self, seed: int, timing: Timing, recorder: Optional[TraceRecorder] = None):
        self.now = 0
        self.seed = seed
        self.timing = timing
        self.rng = random.Random(seed)
        self.recorder = recorder or TraceRecorder()
        self.actors: Dict[str, Actor] = {}
        self.partitions: List[PartitionState] = []
        self.nodes: Set[str] = set()
        self.delivered = 0
        self.dropped = 0
        self.fifo_violations = 0
        self._queue: List[Tuple[int, int, Any]] = []
        self._seq = 0
        self._last_deliver: Dict[Tuple[str, str], int] = {}
        self._last_seen: Dict[Tuple[str, str], Tuple[int, int]] = {}

    # -- registry -----------------------------------------------------------

    def register(self, actor: Actor, physical: bool = False) -> Actor:
        if actor.actor_id in self.actors:
            raise ConfigError(f"Duplicate actor id {actor.actor_id}")
        self.actors[actor.actor_id] = actor
        actor.attach(self)
        if physical:
            self.nodes.add(actor.actor_id)
        return actor

    def actor(self, actor_id: str) -> Actor:
        return self.actors[actor_id]

    # -- scheduling ---------------------------------------------------------

    def schedule(self, at: int, item: Any) -> None:
        """Enqueue an envelope, timer or callback"""
        if at < self.now:
            raise LogicError(f"Cannot schedule at {at}, now is {self.now}")
        heapq.heappush(self._queue, (at, self._seq, item))
        self._seq += 1

    def delay(self, src: str, dst: str) -> int:
        src_sl = getattr(self.actors.get(src), "sl_id", None)
        dst_sl = getattr(self.actors.get(dst), "sl_id", None)
        if src_sl is not None and src_sl == dst_sl:
            return self.rng.randint(1, self.timing.delta)
        return self.rng.randint(10, self.timing.net_delay)

    def send(self, src: str, dst: str, message: Any) -> None:
        at = self.now + self.delay(src, dst)
        pair = (src, dst)
        at = max(at, self._last_deliver.get(pair, 0))
        self._last_deliver[pair] = at
        self.schedule(at, Envelope(src=src, dst=dst, payload=message, send_time=self.now, deliver_time=at))

    def set_timer(self, actor_id: str, at: int, name: str, data: Any = None) -> None:
        self.schedule(at, TimerEvent(actor=actor_id, name=name, data=data))

    def call_at(self, at: int, fn: Callable[[], None], label: str = "") -> None:
        self.schedule(at, Callback(fn=fn, label=label))

    # -- partitions ---------------------------------------------------------

    def set_partition(self, components: List[List[str]], start: int, until: Optional[int] = None) -> PartitionState:
        """
        Split the physical nodes into disjoint components over [start, until).

        Components list entity ids (BG, SL or node ids); "*" stands for every
        node not listed elsewhere.

        Raises:
            ConfigError: if components overlap, name unknown entities or leave nodes uncovered
        """
        if until is not None and until <= start:
            raise ConfigError("Partition must heal after it starts", field="until")
        explicit = {entity for comp in components for entity in comp if entity != "*"}
        known = set(self.nodes)
        for node in self.nodes:
            known.update(ancestors(node))
        unknown = sorted(explicit - known)
        if unknown:
            raise ConfigError(f"Unknown partition entities {unknown}", field="components")
        wildcard = [i for i, comp in enumerate(components) if "*" in comp]
        if len(wildcard) > 1:
            raise ConfigError("Only one component may use '*'", field="components")
        placement: Dict[str, int] = {}
        for node in sorted(self.nodes):
            chain = set(ancestors(node))
            hits = {i for i, comp in enumerate(components) if chain & set(comp)}
            if len(hits) > 1:
                raise ConfigError(f"Overlapping components for {node}", field="components")
            if hits:
                placement[node] = hits.pop()
            elif wildcard:
                placement[node] = wildcard[0]
            else:
                raise ConfigError(f"Components do not cover {node}", field="components")
        state = PartitionState(components=components, start=start, until=until)
        state._placement = placement
        self.partitions.append(state)
        self.call_at(start, lambda: self._trace_partition("partition", state), "partition")
        if until is not None:
            self.call_at(until, lambda: self._trace_partition("heal", state), "heal")
        return state

    def _trace_partition(self, kind: str, state: PartitionState) -> None:
        logger.info("t=%d %s %s", self.now, kind, state.components)
        self.recorder.record(self.now, kind, "engine", components=state.components, until=state.until)

    def active_partition(self) -> Optional[PartitionState]:
        active = [p for p in self.partitions if p.active(self.now)]
        return active[-1] if active else None

    def place(self, actor_id: str) -> Hashable:
        """Component a physical node sits in"""
        partition = self.active_partition()
        if partition is None:
            return UNIFIED
        return partition._placement.get(actor_id, UNIFIED)

    def reachable(self, a: str, b: str) -> bool:
        la = self.actors[a].location() if a in self.actors else None
        lb = self.actors[b].location() if b in self.actors else None
        if la is None or lb is None:
            return False
        if la == ANYWHERE or lb == ANYWHERE:
            return True
        return la == lb

    # -- running ------------------------------------------------------------

    def step(self):
        """
        Dispatch the earliest event.

        Returns:
            (tick, event) or IDLE when the queue is empty
        """
        if not self._queue:
            return IDLE
        at, seq, item = heapq.heappop(self._queue)
        self.now = at
        if isinstance(item, Envelope):
            self._deliver(item, seq)
        elif isinstance(item, TimerEvent):
            actor = self.actors.get(item.actor)
            if actor is not None and not actor.crashed:
                actor.fire(item.name, item.data)
        else:
            item.fn()
        return at, item

    def _deliver(self, env: Envelope, seq: int) -> None:
        dst = self.actors.get(env.dst)
        if dst is None or not self.reachable(env.src, env.dst):
            self.dropped += 1
            return
        pair = (env.src, env.dst)
        last = self._last_seen.get(pair)
        if last is not None and (env.send_time, seq) < last:
            self.fifo_violations += 1
        self._last_seen[pair] = (env.send_time, seq)
        self.delivered += 1
        dst.deliver(env.src, env.payload)

    def run_until(self, tick: int) -> None:
        while self._queue and self._queue[0][0] <= tick:
            self.step()
        self.now = max(self.now, tick)

    def majority_home(self, locations: Iterable[Optional[Hashable]], needed: int) -> Optional[Hashable]:
        """The component holding at least `needed` of the given locations"""
        counts = Counter(loc for loc in locations if loc is not None and loc != ANYWHERE)
        if not counts:
            return None
        loc, count = max(counts.items(), key=lambda kv: (kv[1], str(kv[0])))
        return loc if count >= needed else None
