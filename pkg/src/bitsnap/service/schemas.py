"""Request/response models for the HTTP API."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SaveRequest(BaseModel):
    root: str
    input_path: str
    iteration: Optional[int] = Field(
        default=None, description="Override the iteration stored in the file"
    )
    max_cached_iteration: int = 1
    quantizer_clusters: int = 16


class SaveResponse(BaseModel):
    iteration: int
    kind: str
    base_iteration: int
    tensors_bytes: int


class LoadRequest(BaseModel):
    root: str
    output_path: str
    iteration: Optional[int] = None


class LoadResponse(BaseModel):
    iteration: int
    kind: str
    model_tensors: int
    optimizer_tensors: int
    output_path: str


class InspectRequest(BaseModel):
    root: str


class AgentStatusRequest(BaseModel):
    slots_file: str


class AgentStatusResponse(BaseModel):
    report: str


class SimulateCrashRequest(BaseModel):
    scenario: str = "lost-rank"
    workdir: Optional[str] = None
    seed: int = 0


class SimulateCrashResponse(BaseModel):
    scenario: str
    chosen_iteration: int
    trace: list[str]


class BenchRequest(BaseModel):
    input_path: str
    base_path: Optional[str] = None
    weights: tuple[float, float, float] = (0.2, 0.4, 0.4)
    cr_bounds: tuple[float, float] = (1.0, 16.0)
    cs_bounds: tuple[float, float] = (0.0, 1.0)
    ps_bounds: tuple[float, float] = (0.0, 1e-6)
    clusters: int = 16
    warmup: int = 5
    repeats: int = 20


class BenchResponse(BaseModel):
    cr_raw: float
    cs_raw: float
    ps_raw: float
    cr: float
    cs: float
    ps: float
    q: float
    weights: tuple[float, float, float]
    bounds: dict
