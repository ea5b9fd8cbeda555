"""
Naming and sizing of the simulated system.

BGs are "BG1".., SLs "BG1.SL1".., nodes "BG1.SL1.N1".., CM nodes "CM.BG1",
clients "C1"... Service pseudo-actors are "sl:<sl_id>", "bg:<bg_id>",
"global" and "cm".
"""
import re
from typing import Dict, List

from rcsim.models.scenario import Topology
from rcsim.services.certs import Directory, crypto

GLOBAL_ID = "global"
CM_RSM_ID = "cm"

_DIGITS = re.compile(r"(\d+)")


def natural_key(value: str):
    """Sort key treating digit runs as numbers, so BG2 sorts before BG10"""
    return [int(part) if part.isdigit() else part for part in _DIGITS.split(value)]


def quorum(n: int, f: int) -> int:
    """Intersecting quorum: 2f+1, raised to a majority when f undercounts n"""
    return max(2 * f + 1, (n + f) // 2 + 1)


def sl_service_id(sl_id: str) -> str:
    return f"sl:{sl_id}"


def bg_service_id(bg_id: str) -> str:
    return f"bg:{bg_id}"


def cm_node_id(bg_id: str) -> str:
    return f"CM.{bg_id}"


def bg_of(entity_id: str) -> str:
    if entity_id.startswith("CM."):
        return entity_id[3:]
    return entity_id.split(".")[0]


def sl_of(node_id: str) -> str:
    return ".".join(node_id.split(".")[:2])


class Layout:
    """Entity ids, quorum sizes and key directories for one topology"""

    def __init__(self, topology: Topology):
        self.topology = topology
        total = topology.bgs + topology.spare_bgs
        self.all_bgs: List[str] = [f"BG{i}" for i in range(1, total + 1)]
        self.initial_bgs: List[str] = self.all_bgs[: topology.bgs]
        self.spare_bgs: List[str] = self.all_bgs[topology.bgs:]
        self.sls: Dict[str, List[str]] = {
            bg: [f"{bg}.SL{j}" for j in range(1, topology.sls_per_bg + 1)] for bg in self.all_bgs
        }
        self.nodes: Dict[str, List[str]] = {
            sl: [f"{sl}.N{n}" for n in range(1, topology.nodes_per_sl + 1)]
            for bg in self.all_bgs
            for sl in self.sls[bg]
        }
        self._sl_directories: Dict[str, Directory] = {}

    def bg_nodes(self, bg_id: str) -> List[str]:
        return [node for sl in self.sls[bg_id] for node in self.nodes[sl]]

    def all_nodes(self) -> List[str]:
        return [node for bg in self.all_bgs for node in self.bg_nodes(bg)]

    def bg_quorum(self, bg_id: str) -> int:
        return quorum(len(self.sls[bg_id]), self.topology.f_i)

    def sl_majority(self, sl_id: str) -> int:
        return len(self.nodes[sl_id]) // 2 + 1

    def global_quorum(self, n_bgs: int) -> int:
        return quorum(n_bgs, self.topology.global_f)

    def cm_quorum(self, n_cm: int) -> int:
        return quorum(n_cm, self.topology.cm_f)

    def sl_directory(self, bg_id: str) -> Directory:
        directory = self._sl_directories.get(bg_id)
        if directory is None:
            directory = crypto.directory(self.sls[bg_id])
            self._sl_directories[bg_id] = directory
        return directory

    def bg_directory(self) -> Directory:
        return crypto.directory(self.all_bgs)

    def cm_directory(self) -> Directory:
        return crypto.directory(cm_node_id(bg) for bg in self.all_bgs)

    def emulators(self, bg_id: str) -> List[str]:
        return self.bg_nodes(bg_id)


def cycle_start(cycle: int, batch: int) -> int:
    """Tick at which a cycle begins collecting transactions"""
    return cycle * batch


def epoch_of(cycle: int, epoch_length: int) -> int:
    return (cycle - 1) // epoch_length


def epoch_cycles(epoch: int, epoch_length: int):
    """First and last cycle of an epoch"""
    return epoch * epoch_length + 1, (epoch + 1) * epoch_length
