"""FastAPI service wrapping the checkpoint engine.

The service and its clients share a filesystem (local daemon model), so
requests carry paths rather than tensor payloads.
"""

from __future__ import annotations

import tempfile
from dataclasses import replace

from fastapi import FastAPI, HTTPException

from .. import engine, metrics, scenarios, store
from ..tensors import (
    Checkpoint,
    TensorFormatError,
    read_checkpoint_file,
    write_checkpoint_file,
)
from .schemas import (
    AgentStatusRequest,
    AgentStatusResponse,
    BenchRequest,
    BenchResponse,
    InspectRequest,
    LoadRequest,
    LoadResponse,
    SaveRequest,
    SaveResponse,
    SimulateCrashRequest,
    SimulateCrashResponse,
)

app = FastAPI(title="bitsnap", version="0.1.0")


def _bad_request(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/store/save", response_model=SaveResponse)
def store_save(req: SaveRequest) -> SaveResponse:
    cfg = store.StoreConfig(
        root=req.root,
        max_cached_iteration=req.max_cached_iteration,
        quantizer_clusters=req.quantizer_clusters,
    )
    try:
        ckpt = read_checkpoint_file(req.input_path)
        if req.iteration is not None:
            ckpt = Checkpoint(
                iteration=req.iteration,
                model_states=ckpt.model_states,
                optimizer_states=ckpt.optimizer_states,
            )
        prev = None
        if store.decide_kind(cfg, ckpt.iteration) == store.KIND_DELTA:
            prev = store.load_checkpoint(cfg)
        manifest = store.save_checkpoint(cfg, ckpt, prev)
    except (store.StoreError, TensorFormatError, FileNotFoundError, ValueError) as exc:
        raise _bad_request(exc)
    size = (cfg.iter_dir(manifest.iteration) / "tensors.bin").stat().st_size
    return SaveResponse(
        iteration=manifest.iteration,
        kind=manifest.kind,
        base_iteration=manifest.base_iteration,
        tensors_bytes=size,
    )


@app.post("/store/load", response_model=LoadResponse)
def store_load(req: LoadRequest) -> LoadResponse:
    cfg = store.StoreConfig(root=req.root)
    try:
        ckpt = store.load_checkpoint(cfg, req.iteration)
        manifest = store.read_manifest(cfg, ckpt.iteration)
        write_checkpoint_file(req.output_path, ckpt)
    except (store.StoreError, TensorFormatError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return LoadResponse(
        iteration=ckpt.iteration,
        kind=manifest.kind,
        model_tensors=len(ckpt.model_states),
        optimizer_tensors=len(ckpt.optimizer_states),
        output_path=req.output_path,
    )


@app.post("/store/inspect")
def store_inspect(req: InspectRequest) -> dict:
    return store.inspect(store.StoreConfig(root=req.root))


@app.post("/engine/status", response_model=AgentStatusResponse)
def engine_status(req: AgentStatusRequest) -> AgentStatusResponse:
    try:
        with engine.SlotRegion.open(req.slots_file) as region:
            return AgentStatusResponse(report=engine.status_report(region))
    except (engine.EngineError, FileNotFoundError) as exc:
        raise _bad_request(exc)


@app.post("/engine/simulate-crash", response_model=SimulateCrashResponse)
def simulate_crash(req: SimulateCrashRequest) -> SimulateCrashResponse:
    runner = scenarios.SCENARIOS.get(req.scenario)
    if runner is None:
        raise _bad_request(
            ValueError(
                f"unknown scenario {req.scenario!r}; "
                f"available: {sorted(scenarios.SCENARIOS)}"
            )
        )
    workdir = req.workdir or tempfile.mkdtemp(prefix="bitsnap_sim_")
    decision = runner(workdir, seed=req.seed)
    return SimulateCrashResponse(
        scenario=req.scenario,
        chosen_iteration=decision.chosen_iteration,
        trace=decision.trace,
    )


@app.post("/bench", response_model=BenchResponse)
def bench(req: BenchRequest) -> BenchResponse:
    try:
        ckpt = read_checkpoint_file(req.input_path)
        base = read_checkpoint_file(req.base_path) if req.base_path else None
        report = metrics.measure(
            ckpt,
            base,
            metrics.QualityWeights(*req.weights),
            metrics.FactorBounds(
                cr=req.cr_bounds, cs=req.cs_bounds, ps=req.ps_bounds
            ),
            clusters=req.clusters,
            warmup=req.warmup,
            repeats=req.repeats,
        )
    except (metrics.MetricsError, TensorFormatError, FileNotFoundError) as exc:
        raise _bad_request(exc)
    return BenchResponse(**report.to_dict())
