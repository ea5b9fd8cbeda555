import pytest
from fastapi.testclient import TestClient

from rcsim.main import app


@pytest.fixture
def client():
    return TestClient(app)


def test_root_and_health(client):
    assert client.get("/health").json() == {"status": "healthy"}
    assert client.get("/").json()["endpoints"]["simulation"] == "/simulation"


def test_list_scenarios(client):
    names = client.get("/simulation/scenarios").json()
    assert "cm_walkthrough" in names
    assert "f16_early_exit" in names


def test_run_lifecycle(client):
    response = client.post("/simulation/run", json={"scenario": "cm_walkthrough"})
    assert response.status_code == 200
    run = response.json()
    assert all(v["passed"] for v in run["verdicts"])
    run_id = run["run_id"]

    assert client.get(f"/simulation/{run_id}").json()["trace_digest"] == run["trace_digest"]
    verdicts = client.post(f"/simulation/{run_id}/verify").json()
    assert [v["passed"] for v in verdicts] == [v["passed"] for v in run["verdicts"]]

    graph = client.get(f"/simulation/{run_id}/graph/1").json()
    assert graph["adjacency"] == {"BG1": ["BG3"], "BG2": ["BG1"], "BG3": ["BG1"]}
    assert client.get(f"/simulation/{run_id}/graph/99").status_code == 404

    assert client.delete(f"/simulation/{run_id}").json() == {"deleted": run_id}
    assert client.get(f"/simulation/{run_id}").status_code == 404
    assert client.delete(f"/simulation/{run_id}").status_code == 404


def test_run_inline_document(client):
    document = {"name": "inline", "cycles": 3, "clients": {"count": 2}, "min_commit_ratio": 0.3}
    response = client.post("/simulation/run", json={"document": document, "seed": 3})
    assert response.status_code == 200
    assert response.json()["seed"] == 3
    assert response.json()["scenario"] == "inline"


@pytest.mark.parametrize(
    "body",
    [
        {},
        {"scenario": "no_such_scenario"},
        {"document": {"name": "bad", "timing": {"batch": 1}}},
        {"scenario": "cm_walkthrough", "analysis": "sometimes"},
    ],
)
def test_bad_run_requests(client, body):
    assert client.post("/simulation/run", json=body).status_code == 422


def test_unknown_run(client):
    assert client.get("/simulation/missing").status_code == 404
    assert client.post("/simulation/missing/verify").status_code == 404
    assert client.get("/simulation/missing/graph/1").status_code == 404


def test_matrix_rejects_unknown_classes(client):
    assert client.post("/simulation/matrix", json={"classes": ["F99"]}).status_code == 422
