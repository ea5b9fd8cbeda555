"""
The physical node actor.

A node plays every role the protocol assigns to it at once: SL member,
monitor (when elected), representative and emulator. Each role lives in
its own mixin; this module wires the hooks between them.
"""
import logging
from typing import Optional, Set

from rcsim.models.protocol import RoleMap, SLRoundState
from rcsim.models.scenario import Policy, Timing
from rcsim.services.bg_consensus import BGMonitor
from rcsim.services.engine import Actor
from rcsim.services.exchange import ExchangeRole
from rcsim.services.layout import Layout, bg_of, sl_of
from rcsim.services.superleaf import SuperleafMember

logger = logging.getLogger(__name__)


class Node(SuperleafMember, BGMonitor, ExchangeRole, Actor):
    """Represents one physical node of an SL"""

    def __init__(self, node_id: str, layout: Layout, timing: Timing, policy: Policy):
        Actor.__init__(self, node_id)
        self.sl_id = sl_of(node_id)
        self.bg_id = bg_of(node_id)
        self.layout = layout
        self.timing = timing
        self.policy = policy
        self.behaviors: Set[str] = set()
        self.flagged_clients: Set[str] = set()
        self.init_superleaf()
        self.init_bg_monitor()
        self.init_exchange()

    def start(self) -> None:
        # spare BGs batch too; their inputs count once a view admits them
        self.start_superleaf()

    def on_sealed(self, cycle: int, state: SLRoundState) -> None:
        if self.is_monitor:
            self.bg_propose(cycle)

    def on_roles_changed(self, previous: Optional[RoleMap], roles: RoleMap) -> None:
        BGMonitor.on_roles_changed(self, previous, roles)
        if previous is None or previous.monitor != roles.monitor or previous.representatives != roles.representatives:
            logger.debug("t=%d %s roles now %s", self.now, self.actor_id, roles)
        self.resume_exchange()

    def crash(self) -> None:
        super().crash()
        logger.info("t=%d %s crashed", self.now, self.actor_id)

    def recover(self) -> None:
        super().recover()
        logger.info("t=%d %s recovered", self.now, self.actor_id)
        # timers lapsed while down; missed SL items and commits come back from peers
        self.fetches.clear()
        self.view_requested.clear()
        self.transfer_inflight = False
        self.rejoin_requested = False
        self.start_superleaf(self.current_cycle() + 1)
        self.request_sl_rejoin()
        self.request_transfer()
