import pytest

from rcsim.models.scenario import Scenario, Topology
from rcsim.services.certs import crypto
from rcsim.services.layout import Layout


@pytest.fixture(autouse=True)
def keyed_hash_signer(monkeypatch):
    monkeypatch.delenv("RCSIM_SEED", raising=False)
    monkeypatch.setenv("RCSIM_SIGNER", "keyed-hash")
    crypto.use("keyed-hash")
    yield
    crypto.use("keyed-hash")


@pytest.fixture
def topology():
    return Topology(bgs=3, sls_per_bg=4, nodes_per_sl=3, f_i=1)


@pytest.fixture
def layout(topology):
    return Layout(topology)


def _short_scenario(name: str = "short", cycles: int = 8, **overrides) -> Scenario:
    document = {
        "name": name,
        "cycles": cycles,
        "clients": {"count": 3, "rate_per_tick": 0.002},
        "min_commit_ratio": 0.5,
    }
    document.update(overrides)
    return Scenario.model_validate(document)


@pytest.fixture
def short_scenario():
    """Default topology and timing, few cycles, a light client load"""
    return _short_scenario
