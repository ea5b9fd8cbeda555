import logging
from typing import List

from fastapi import APIRouter, HTTPException

from rcsim.errors import ConfigError, RCSimError
from rcsim.models.scenario import Scenario
from rcsim.models.trace import GraphResponse, MatrixRequest, MatrixRow, RunRequest, RunResult, Verdict
from rcsim.services import harness
from rcsim.storage import trace_store

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/simulation", tags=["simulation"])


def _scenario_for(request: RunRequest) -> Scenario:
    if request.document is not None:
        try:
            scenario = Scenario.model_validate(request.document)
        except ValueError as e:
            raise HTTPException(status_code=422, detail=str(e))
    elif request.scenario is not None:
        scenario = harness.shipped_scenario(request.scenario)
    else:
        raise HTTPException(status_code=422, detail="Provide a scenario name or document")
    return harness.apply_overrides(scenario, request.policy, request.analysis)


@router.get("/scenarios", response_model=List[str])
async def list_scenarios():
    """Names of the shipped scenarios"""
    return harness.list_scenarios()


@router.post("/run", response_model=RunResult)
async def run_simulation(request: RunRequest):
    """
    Run a scenario to completion and check every invariant

    Args:
        request: Shipped scenario name or inline document, plus optional overrides

    Returns:
        The run's verdicts and trace digest
    """
    try:
        scenario = _scenario_for(request)
        result, events = harness.run_result(scenario, request.seed)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except RCSimError as e:
        logger.exception("Run failed")
        raise HTTPException(status_code=500, detail=str(e))
    trace_store.save_run(result, events)
    return result


@router.get("/{run_id}", response_model=RunResult)
async def get_run(run_id: str):
    """Get a finished run"""
    result = trace_store.get_run(run_id)
    if not result:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return result


@router.post("/{run_id}/verify", response_model=List[Verdict])
async def verify_run(run_id: str):
    """Re-check a stored trace with the oracle"""
    events = trace_store.get_events(run_id)
    if events is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return harness.verify_trace(events)


@router.get("/{run_id}/graph/{cycle}", response_model=GraphResponse)
async def get_graph(run_id: str, cycle: int):
    """Communication graph the CM analyzed for one cycle"""
    events = trace_store.get_events(run_id)
    if events is None:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    adjacency = harness.comm_graph(events, cycle)
    if adjacency is None:
        raise HTTPException(status_code=404, detail=f"No graph for cycle {cycle}")
    return GraphResponse(run_id=run_id, cycle=cycle, adjacency=adjacency)


@router.delete("/{run_id}")
async def delete_run(run_id: str):
    if not trace_store.delete_run(run_id):
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return {"deleted": run_id}


@router.post("/matrix", response_model=List[MatrixRow])
async def run_matrix(request: MatrixRequest):
    """Run the F1..F16 fault suite"""
    unknown = [c for c in request.classes or [] if c not in harness.MATRIX]
    if unknown:
        raise HTTPException(status_code=422, detail=f"Unknown fault classes {unknown}")
    try:
        return harness.run_matrix(seeds=request.seeds, classes=request.classes)
    except ConfigError as e:
        raise HTTPException(status_code=422, detail=str(e))
