from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

FaultClass = Literal[
    "F1", "F2", "F3", "F4", "F5", "F6", "F7", "F8",
    "F9", "F10", "F11", "F12", "F13", "F14", "F15", "F16",
]

ByzantineBehavior = Literal[
    "equivocate_state",
    "omit_transactions",
    "silent_emulator",
    "lie_in_response",
    "bias_tx_numbering",
    "false_accusation",
    "malformed_command",
    "ignore_clients",
]

# Fault classes that corrupt a whole SL
BYZANTINE_CLASSES = {"F5": "bias_tx_numbering", "F6": "silent_emulator", "F8": "lie_in_response"}

# Fault classes that corrupt a single node
NODE_BYZANTINE_CLASSES = {"F7": "ignore_clients"}


class Topology(BaseModel):
    """Shape of the system and its fault tolerances"""
    model_config = ConfigDict(extra="forbid")

    bgs: int = Field(default=3, ge=1)
    sls_per_bg: int = Field(default=4, ge=1)
    nodes_per_sl: int = Field(default=3, ge=1)
    f_i: int = Field(default=1, ge=0)
    f_g: Optional[int] = Field(default=None, ge=0)
    # CM fault tolerance
    f: Optional[int] = Field(default=None, ge=0)
    # BGs that exist but stay outside the system until they join
    spare_bgs: int = Field(default=0, ge=0)

    @property
    def global_f(self) -> int:
        return self.f_g if self.f_g is not None else (self.bgs - 1) // 3

    @property
    def cm_f(self) -> int:
        return self.f if self.f is not None else (self.bgs - 1) // 3

    @property
    def sl_f(self) -> int:
        return (self.nodes_per_sl - 1) // 2


class Timing(BaseModel):
    """Timing parameters in ticks (1 tick = 1 ms)"""
    model_config = ConfigDict(extra="forbid")

    delta: int = Field(default=5, ge=1)
    big_delta: int = Field(default=500, ge=1)
    net_delay: int = Field(default=200, ge=10)
    batch: int = Field(default=1000, ge=10)
    k: int = Field(default=2, ge=0)
    epoch: int = Field(default=32, ge=1)
    horizon: int = Field(default=8, ge=0)
    dedup_window: int = Field(default=8, ge=1)
    client_timeout: Optional[int] = None

    @property
    def timeout(self) -> int:
        return self.client_timeout or 3 * (self.batch + self.big_delta)

    @model_validator(mode="after")
    def check_bounds(self) -> "Timing":
        if self.net_delay >= self.big_delta:
            raise ValueError("net_delay must stay below big_delta")
        if self.delta * 10 > self.batch:
            raise ValueError("batch must be much larger than delta")
        return self


class AnalysisPolicy(BaseModel):
    """FULL or REPLICATION(R) graph analysis"""
    model_config = ConfigDict(frozen=True)

    kind: Literal["full", "replication"] = "full"
    r: int = 0

    @classmethod
    def parse(cls, text: str) -> "AnalysisPolicy":
        text = text.strip().lower()
        if text == "full":
            return cls(kind="full")
        if text.startswith("replication:"):
            r = int(text.split(":", 1)[1])
            if r < 1:
                raise ValueError("replication factor must be at least 1")
            return cls(kind="replication", r=r)
        raise ValueError(f"Unknown analysis policy '{text}'")

    def __str__(self) -> str:
        return "full" if self.kind == "full" else f"replication:{self.r}"


class Policy(BaseModel):
    """How partitions are handled and how the CM analyzes"""
    model_config = ConfigDict(extra="forbid")

    mode: Literal["global", "cm"] = "global"
    analysis: str = "full"
    cm_bypass: bool = True
    cm_submission: Literal["leader", "any"] = "leader"

    @field_validator("analysis")
    @classmethod
    def check_analysis(cls, value: str) -> str:
        AnalysisPolicy.parse(value)
        return value

    @property
    def analysis_policy(self) -> AnalysisPolicy:
        return AnalysisPolicy.parse(self.analysis)


class ClientSpec(BaseModel):
    """Client population"""
    model_config = ConfigDict(extra="forbid")

    count: int = Field(default=6, ge=0)
    rate_per_tick: float = Field(default=0.002, gt=0)
    payload_bytes: int = Field(default=32, ge=1)
    # clients that reuse a nonce with a different payload
    equivocating: int = Field(default=0, ge=0)


class Fault(BaseModel):
    """One scheduled fault"""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    fault_class: FaultClass = Field(alias="class")
    target: Optional[str] = None
    at: Optional[int] = Field(default=None, ge=0)
    cycle: Optional[int] = Field(default=None, ge=1)
    offset: int = 0
    until: Optional[int] = None
    until_cycle: Optional[int] = None
    recover_at: Optional[int] = None
    behavior: Optional[ByzantineBehavior] = None
    components: Optional[List[List[str]]] = None

    @model_validator(mode="after")
    def check_time(self) -> "Fault":
        if self.at is None and self.cycle is None:
            raise ValueError("fault needs 'at' or 'cycle'")
        if self.fault_class in ("F10", "F13", "F15") and not self.components:
            raise ValueError(f"{self.fault_class} needs partition components")
        if self.fault_class == "F11" and self.behavior is None:
            raise ValueError("F11 needs a Byzantine behavior")
        return self


class ScriptReport(BaseModel):
    """A scripted BG_REPORT with labeled hashes"""
    model_config = ConfigDict(extra="forbid")

    reporter: str
    own: str
    received: Dict[str, str] = Field(default_factory=dict)


class ScriptCycle(BaseModel):
    """Membership and reports for one scripted cycle"""
    model_config = ConfigDict(extra="forbid")

    cycle: int = Field(ge=1)
    members: List[str]
    reports: List[ScriptReport] = Field(default_factory=list)
    expect_committed: Optional[List[str]] = None
    expect_fn: Optional[List[str]] = None


class Script(BaseModel):
    """Scripted CM input, bypassing the lower tiers"""
    model_config = ConfigDict(extra="forbid")

    cycles: List[ScriptCycle]


class Scenario(BaseModel):
    """A complete, reproducible simulation run"""
    model_config = ConfigDict(extra="forbid")

    name: str
    description: str = ""
    seed: int = 42
    cycles: int = Field(default=40, ge=1)
    duration: Optional[int] = None
    topology: Topology = Field(default_factory=Topology)
    timing: Timing = Field(default_factory=Timing)
    policy: Policy = Field(default_factory=Policy)
    clients: ClientSpec = Field(default_factory=ClientSpec)
    faults: List[Fault] = Field(default_factory=list)
    byzantine: Dict[str, List[ByzantineBehavior]] = Field(default_factory=dict)
    assumption_breach: bool = False
    script: Optional[Script] = None
    # trace kind -> minimum count the run must produce
    expect_events: Dict[str, int] = Field(default_factory=dict)
    forbid_events: List[str] = Field(default_factory=list)
    min_commit_ratio: float = Field(default=0.75, ge=0, le=1)

    @property
    def commit_delay(self) -> int:
        if self.policy.mode == "cm":
            return max(1, self.timing.k)
        return 1

    @property
    def total_ticks(self) -> int:
        if self.duration is not None:
            return self.duration
        return (self.cycles + self.commit_delay + 3) * self.timing.batch

    @model_validator(mode="after")
    def check_preconditions(self) -> "Scenario":
        topo = self.topology
        if self.assumption_breach:
            return self
        if topo.sls_per_bg < 3 * topo.f_i + 1:
            raise ValueError("sls_per_bg must exceed 3 * f_i")
        byzantine_per_bg: Dict[str, set] = {}
        for sl_id in self.byzantine:
            byzantine_per_bg.setdefault(sl_id.split(".")[0], set()).add(sl_id)
        for fault in self.faults:
            if (fault.fault_class in BYZANTINE_CLASSES or fault.fault_class == "F11") and fault.target:
                byzantine_per_bg.setdefault(fault.target.split(".")[0], set()).add(fault.target)
        for bg_id, sls in byzantine_per_bg.items():
            if len(sls) > topo.f_i:
                raise ValueError(f"{bg_id} has more than f_i Byzantine SLs")
        if self.policy.mode == "cm" and self.policy.cm_bypass and self.timing.k < 1:
            raise ValueError("CM bypass needs k >= 1")
        return self
