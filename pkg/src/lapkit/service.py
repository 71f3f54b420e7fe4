"""FastAPI service wrapping the toolkit.

Endpoints run the batch pipeline operations (writing artifacts under a
caller-supplied out_dir and returning paths plus summaries) and expose the
pure predictive transforms for direct use. Errors carry a ``kind`` the CLI
maps onto exit codes: config -> 1, numerical -> 2, io -> 3.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import __version__, pipeline
from .errors import (
    CalibrationError,
    ConfigError,
    DimensionError,
    DomainError,
    LapkitError,
    NumericalError,
    ResourceError,
)
from .predictive import PREDICTIVES, predictive_by_name

app = FastAPI(title="lapkit", version=__version__)

_ERROR_KINDS = (
    (ConfigError, "config", 400),
    ((DimensionError, DomainError, ResourceError, NumericalError, CalibrationError), "numerical", 422),
)


@app.exception_handler(LapkitError)
async def _handle_toolkit(request: Request, err: LapkitError):
    for types, kind, status in _ERROR_KINDS:
        if isinstance(err, types):
            return JSONResponse(status_code=status, content={"error": kind, "message": str(err)})
    return JSONResponse(status_code=422, content={"error": "numerical", "message": str(err)})


@app.exception_handler(OSError)
async def _handle_io(request: Request, err: OSError):
    return JSONResponse(status_code=500, content={"error": "io", "message": str(err)})


class HealthResponse(BaseModel):
    status: str
    version: str


class JobRequest(BaseModel):
    """Config payload plus where to put the artifacts."""

    config: dict = Field(default_factory=dict)
    out_dir: str
    seed: Optional[int] = None


class TrainResponse(BaseModel):
    checkpoint: str
    final_loss: Optional[float] = None
    train_rmse: Optional[float] = None


class LaplaceRequest(JobRequest):
    checkpoint: str


class SweepRequest(JobRequest):
    threads: int = 4


class PlotDataRequest(BaseModel):
    artifacts: list[str] = Field(default_factory=list)
    out_dir: str


class PredictiveRequest(BaseModel):
    name: str
    mean: list[float]
    cov: list[list[float]]
    n_samples: int = 10000
    seed: int = 0


class PredictiveResponse(BaseModel):
    probs: list[float]


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/data/generate")
def generate_data(req: JobRequest) -> dict:
    cfg = pipeline.resolve_config(req.config, seed=req.seed)
    return pipeline.gen_data_files(cfg, req.out_dir)


@app.post("/train", response_model=TrainResponse)
def train(req: JobRequest) -> TrainResponse:
    cfg = pipeline.resolve_config(req.config, seed=req.seed)
    result = pipeline.train_map(cfg, req.out_dir)
    return TrainResponse(
        checkpoint=result["checkpoint"],
        final_loss=result.get("final_loss"),
        train_rmse=result.get("train_rmse"),
    )


@app.post("/laplace")
def laplace(req: LaplaceRequest) -> dict:
    cfg = pipeline.resolve_config(req.config, seed=req.seed)
    return pipeline.run_laplace(cfg, req.checkpoint, req.out_dir)


@app.post("/sweep")
def sweep(req: SweepRequest) -> dict:
    cfg = pipeline.resolve_config(req.config, seed=req.seed)
    return pipeline.run_sweep(cfg, req.out_dir, threads=req.threads)


@app.post("/fsp")
def fsp(req: JobRequest) -> dict:
    cfg = pipeline.resolve_config(req.config, seed=req.seed)
    return pipeline.run_fsp(cfg, req.out_dir)


@app.post("/plot-data")
def plot_data(req: PlotDataRequest) -> dict:
    return {"files": pipeline.plot_data(req.artifacts, req.out_dir)}


@app.post("/predictive", response_model=PredictiveResponse)
def predictive(req: PredictiveRequest) -> PredictiveResponse:
    if req.name not in PREDICTIVES:
        raise ConfigError(f"unknown predictive {req.name!r}, expected one of {PREDICTIVES}")
    fn = predictive_by_name(req.name)
    mean = np.asarray(req.mean, dtype=np.float64)
    cov = np.asarray(req.cov, dtype=np.float64)
    if req.name == "mc_bridge":
        probs = fn(mean, cov, req.n_samples, seed=req.seed)
    else:
        probs = fn(mean, cov)
    return PredictiveResponse(probs=[float(p) for p in probs])
