"""
Intra-SL tier: batching, atomic broadcast, roles and quorum-loss stalls.

The SL's crash-tolerant layer is modeled by SLService, a leader-sequenced
broadcast that is available while a majority of the SL's members are up and
in one partition component. Members deliver items in sequence-number order;
a gap means the member missed items and must rejoin.
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

from rcsim.models.messages import (
    ClientSubmit,
    PayloadItem,
    RepStalledItem,
    RolesItem,
    SealItem,
    SLDeliver,
    SLItem,
    SLRejoinGrant,
    SLRejoinRequest,
    SLSubmit,
    TBItem,
)
from rcsim.models.protocol import ClientTx, RoleMap, SLRoundState, TransactionBlock
from rcsim.models.scenario import Timing
from rcsim.services.certs import merkle_root
from rcsim.services.client import verify_tx
from rcsim.services.engine import Actor
from rcsim.services.layout import Layout, cycle_start, natural_key, sl_service_id

logger = logging.getLogger(__name__)


def make_tb(
    origin: str,
    sl_id: str,
    cycle: int,
    txs: Sequence[ClientTx],
    claimed_number: Optional[int] = None,
) -> TransactionBlock:
    """Batch txs, in arrival order, under the Merkle root of their digests"""
    return TransactionBlock(
        origin=origin,
        sl_id=sl_id,
        cycle=cycle,
        txs=tuple(txs),
        root=merkle_root([tx.digest for tx in txs]),
        claimed_number=claimed_number,
    )


def tb_valid(tb: TransactionBlock) -> bool:
    return bool(tb.txs) and tb.root == merkle_root([tx.digest for tx in tb.txs])


def elect_roles(members: Sequence[str], live: Sequence[str], k: int) -> RoleMap:
    """
    Pick the monitor and representatives among live members.

    The monitor is the lowest live member id and is always one of the
    representatives; with fewer than k live members every live member
    represents the SL.
    """
    ordered = sorted((m for m in members if m in set(live)), key=natural_key)
    if not ordered:
        return RoleMap(monitor=None, representatives=(), live=())
    return RoleMap(
        monitor=ordered[0],
        representatives=tuple(ordered[: max(1, k)]),
        live=tuple(ordered),
    )


class SLService(Actor):
    """Atomic broadcast and membership for one SL"""

    def __init__(self, sl_id: str, layout: Layout, timing: Timing):
        super().__init__(sl_service_id(sl_id))
        self.sl_id = sl_id
        self.layout = layout
        self.timing = timing
        self.members: List[str] = list(layout.nodes[sl_id])
        self.seq = 0
        self.log: List[Tuple[int, SLItem]] = []
        self.roles: Optional[RoleMap] = None
        self.sealed = 0
        # members that missed broadcasts -> first sequence number they may lack
        self.behind: Dict[str, int] = {}
        self.stalled = False

    def location(self):
        return self.engine.majority_home(
            (self.engine.actors[m].location() for m in self.members),
            self.layout.sl_majority(self.sl_id),
        )

    def start(self) -> None:
        self.set_timer(cycle_start(1, self.timing.batch) + 2 * self.timing.batch, "seal", 1)

    def sl_broadcast(self, item: SLItem) -> int:
        """Sequence item and deliver it to every member"""
        self.seq += 1
        self.log.append((self.seq, item))
        for member in self.members:
            self.send(member, SLDeliver(seq=self.seq, item=item))
        return self.seq

    def handle_sl_submit(self, src: str, message: SLSubmit) -> None:
        if src not in self.members:
            return
        if src in self.behind:
            self._grant(src, self.behind.pop(src))
        item = message.item
        if isinstance(item, TBItem) and item.tb.cycle <= self.sealed:
            # late block rolls into the next open cycle
            item = TBItem(tb=item.tb.model_copy(update={"cycle": self.sealed + 1}))
        self.sl_broadcast(item)

    def timer_seal(self, cycle: int) -> None:
        self.set_timer(self.now + self.timing.batch, "seal", cycle + 1)
        if self.location() is None:
            if not self.stalled:
                self.stalled = True
                logger.info("t=%d %s lost quorum", self.now, self.sl_id)
                self.trace("stall", reason="sl_quorum", cycle=cycle)
            return
        if self.stalled:
            self.stalled = False
            self.trace("rejoin", entity=self.sl_id, cycle=cycle)
        live = [m for m in self.members if self.engine.reachable(self.actor_id, m)]
        for member in self.members:
            if member not in live:
                self.behind.setdefault(member, self.seq + 1)
        roles = elect_roles(self.members, live, self.timing.k)
        if roles != self.roles:
            self.roles = roles
            self.sl_broadcast(RolesItem(cycle=cycle, roles=roles))
            self.trace(
                "roles", cycle=cycle, monitor=roles.monitor, representatives=list(roles.representatives)
            )
        self.sealed = cycle
        self.sl_broadcast(SealItem(cycle=cycle))
        self.trace("seal", cycle=cycle)

    def handle_sl_rejoin_request(self, src: str, message: SLRejoinRequest) -> None:
        if src not in self.members:
            return
        self.behind.pop(src, None)
        self._grant(src, message.from_seq)

    def _grant(self, node: str, from_seq: int) -> None:
        items = tuple((seq, item) for seq, item in self.log if seq >= from_seq)
        self.send(node, SLRejoinGrant(items=items, roles=self.roles))


class SuperleafMember:
    """Node-side SL behavior: batching, ordered delivery, stall detection"""

    def init_superleaf(self) -> None:
        self.expected_seq = 1
        self.rounds: Dict[int, SLRoundState] = {}
        self.pending_txs: List[ClientTx] = []
        self.seen_keys: Dict[Tuple[str, int], bytes] = {}
        self.roles: Optional[RoleMap] = None
        self.sl_stalled = False
        self.rejoin_requested = False

    @property
    def sl_service(self) -> str:
        return sl_service_id(self.sl_id)

    def round_state(self, cycle: int) -> SLRoundState:
        state = self.rounds.get(cycle)
        if state is None:
            state = SLRoundState(cycle=cycle)
            self.rounds[cycle] = state
        return state

    def start_superleaf(self, first_cycle: int = 1) -> None:
        b = self.timing.batch
        self.set_timer(cycle_start(first_cycle, b) + b, "batch", first_cycle)

    def handle_client_submit(self, src: str, message: ClientSubmit) -> None:
        tx = message.tx
        if "ignore_clients" in self.behaviors or self.sl_stalled or self.own_bg_excluded():
            return
        if not verify_tx(tx):
            return
        known = self.seen_keys.get(tx.key)
        if known is not None and known != tx.digest:
            self.flag_client(tx.client_id, "conflicting nonce at SL")
            return
        self.seen_keys[tx.key] = tx.digest
        self.pending_txs.append(tx)

    def flag_client(self, client_id: str, reason: str) -> None:
        if client_id not in self.flagged_clients:
            self.flagged_clients.add(client_id)
            self.trace("client_flagged", peer=client_id, reason=reason)

    def timer_batch(self, cycle: int) -> None:
        b = self.timing.batch
        self.set_timer(cycle_start(cycle + 1, b) + b, "batch", cycle + 1)
        self.set_timer(cycle_start(cycle, b) + 2 * b + 3 * self.timing.delta, "watchdog", cycle)
        state = self.round_state(cycle)
        state.phase = "broadcast"
        if not self.pending_txs:
            return
        txs, self.pending_txs = self.pending_txs, []
        claimed = 0 if "bias_tx_numbering" in self.behaviors else None
        tb = make_tb(self.actor_id, self.sl_id, cycle, txs, claimed_number=claimed)
        self.send(self.sl_service, SLSubmit(item=TBItem(tb=tb)))

    def timer_watchdog(self, cycle: int) -> None:
        if self.round_state(cycle).phase != "sealed" and not self.sl_stalled:
            self.sl_stalled = True
            self.trace("stall", reason="sl_quorum", cycle=cycle)

    def handle_sl_deliver(self, src: str, message: SLDeliver) -> None:
        if message.seq < self.expected_seq:
            return
        if message.seq > self.expected_seq:
            self.request_sl_rejoin()
            return
        self.expected_seq += 1
        self.apply_sl_item(message.item)

    def request_sl_rejoin(self) -> None:
        if not self.rejoin_requested:
            self.rejoin_requested = True
            self.send(self.sl_service, SLRejoinRequest(node=self.actor_id, from_seq=self.expected_seq))

    def handle_sl_rejoin_grant(self, src: str, message: SLRejoinGrant) -> None:
        self.rejoin_requested = False
        replayed = 0
        for seq, item in message.items:
            if seq == self.expected_seq:
                self.expected_seq += 1
                self.apply_sl_item(item)
                replayed += 1
        if message.roles is not None and message.roles != self.roles:
            self.set_roles(message.roles)
        self.trace("rejoin", entity=self.actor_id, replayed=replayed)

    def apply_sl_item(self, item: SLItem) -> None:
        if isinstance(item, TBItem):
            state = self.round_state(item.tb.cycle)
            if state.phase != "sealed":
                state.tbs.append(item.tb)
                for tx in item.tb.txs:
                    known = self.seen_keys.get(tx.key)
                    if known is not None and known != tx.digest:
                        self.flag_client(tx.client_id, "conflicting nonce at SL")
                    self.seen_keys.setdefault(tx.key, tx.digest)
        elif isinstance(item, SealItem):
            state = self.round_state(item.cycle)
            if state.phase == "sealed":
                return
            state.phase = "sealed"
            state.roles = self.roles
            if self.sl_stalled:
                self.sl_stalled = False
                self.trace("rejoin", entity=self.actor_id, cycle=item.cycle)
            self.on_sealed(item.cycle, state)
        elif isinstance(item, RolesItem):
            self.set_roles(item.roles)
        elif isinstance(item, PayloadItem):
            self.on_payload_item(item)
        elif isinstance(item, RepStalledItem):
            self.on_rep_stalled(item)

    def set_roles(self, roles: RoleMap) -> None:
        previous, self.roles = self.roles, roles
        self.on_roles_changed(previous, roles)

    def seal_round1(self, cycle: int) -> List[TransactionBlock]:
        """The agreed TB list of a sealed cycle, empty before the seal"""
        state = self.rounds.get(cycle)
        if state is None or state.phase != "sealed":
            return []
        return list(state.tbs)

    def sl_submit(self, item: SLItem) -> None:
        self.send(self.sl_service, SLSubmit(item=item))

    @property
    def is_monitor(self) -> bool:
        return self.roles is not None and self.roles.monitor == self.actor_id

    @property
    def is_representative(self) -> bool:
        return self.roles is not None and self.actor_id in self.roles.representatives
