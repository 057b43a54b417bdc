"""HTTP front end: each harness command is one POST endpoint.

The CLI is a thin client of this app; it talks to a live server or, by
default, to an in-process instance.  Configuration errors map to 422
(pydantic) or 400 (`ConfigError`), so clients can translate them to
the stable exit-code contract (2 = config error, 1 = check failure).
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from . import __version__, runners
from .runners import ConfigError
from .schemas import (BenchResponse, DriftResponse, GenerateResponse,
                      MemAccessResponse, RunSpec, VerifyResponse)

app = FastAPI(title="resa", version=__version__)


def _guard(fn, *args):
    try:
        return fn(*args)
    except ConfigError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.post("/verify", response_model=VerifyResponse)
def verify(spec: RunSpec) -> VerifyResponse:
    checks = _guard(runners.run_verify, spec)
    passed = all(c.passed for c in checks)
    return VerifyResponse(passed=passed, exit_code=0 if passed else 1, checks=checks)


@app.post("/drift", response_model=DriftResponse)
def drift(spec: RunSpec) -> DriftResponse:
    rows = _guard(runners.run_drift, spec)
    return DriftResponse(rows=rows, csv=runners.drift_csv(rows))


@app.post("/memaccess", response_model=MemAccessResponse)
def memaccess(spec: RunSpec) -> MemAccessResponse:
    return MemAccessResponse(row=_guard(runners.run_memaccess, spec))


@app.post("/bench", response_model=BenchResponse)
def bench(spec: RunSpec) -> BenchResponse:
    rows = _guard(runners.run_bench, spec)
    return BenchResponse(rows=rows, csv=runners.bench_csv(rows))


@app.post("/generate", response_model=GenerateResponse)
def generate(spec: RunSpec) -> GenerateResponse:
    row, tokens = _guard(runners.run_generate, spec)
    text_hex = bytes(t for t in tokens if t < 256).hex()
    return GenerateResponse(tokens=tokens, text_hex=text_hex, row=row)
