"""Pydantic request/response models shared by the HTTP service and the CLI."""

from __future__ import annotations

from typing import Literal, Optional

from pydantic import BaseModel, Field, model_validator

Mode = Literal["dense", "sparse", "resa"]

# wire name -> decoder-internal mode name
MODE_MAP = {"dense": "dense", "sparse": "sparse_only", "resa": "resa"}


class RunSpec(BaseModel):
    """One run request: model source, sparsity knobs, prompt source, schedule.

    The prompt comes from exactly one source: explicit hex bytes, a
    file of raw bytes, or a seeded random byte sequence of
    ``prefix_len`` (the default when neither hex nor file is given).
    """

    seed: int = 0x5EED_0001
    weight_file: Optional[str] = None

    block_size: int = Field(16, ge=1)
    sparsity: float = Field(0.9, ge=0.0, lt=1.0)
    n_min: int = Field(16, ge=1)
    n_local: int = Field(1, ge=1)
    rectify_freq: int = Field(32, ge=1)
    dense_prefix_layers: int = Field(0, ge=0)

    prompt_hex: Optional[str] = None
    prompt_file: Optional[str] = None
    prompt_seed: Optional[int] = None
    prefix_len: int = Field(512, ge=1)

    max_steps: int = Field(256, ge=1)
    mode: Mode = "resa"
    probe_steps: Optional[list[int]] = None
    measure_drift: bool = False

    sweep: bool = False
    sweep_freqs: list[int] = [16, 32, 64, 128]
    sweep_sparsities: list[float] = [0.9, 0.95, 0.98]

    bench_prefixes: list[int] = [1024, 4096, 8192]
    bench_steps: int = Field(64, ge=1)

    out: Optional[str] = None

    @model_validator(mode="after")
    def _one_prompt_source(self):
        if self.prompt_hex is not None and self.prompt_file is not None:
            raise ValueError("give at most one of prompt_hex / prompt_file")
        if self.n_min < self.n_local:
            raise ValueError("need n_min >= n_local")
        return self


class CheckResult(BaseModel):
    name: str
    passed: bool
    observed: float
    allowed: float
    detail: str = ""


class VerifyResponse(BaseModel):
    passed: bool
    exit_code: int
    checks: list[CheckResult]


class DriftRow(BaseModel):
    step: int
    mode: str
    max_abs_drift: float
    mean_l2_drift: float
    sparsity: float
    rectify_freq: int
    post_rectification: bool = False


class DriftResponse(BaseModel):
    rows: list[DriftRow]
    csv: str


class ResultRow(BaseModel):
    run_id: str
    mode: str
    block_size: int
    sparsity: float
    rectify_freq: int
    max_steps: int
    prefix_len: int
    tokens_per_sec: float
    mem_ratio_measured: float
    mem_ratio_predicted: float
    selection_share: float
    attention_share: float
    rectification_share: float
    final_drift_max_abs: Optional[float] = None
    tokens_emitted: int


class MemAccessResponse(BaseModel):
    row: ResultRow


class BenchRow(BaseModel):
    prefix: int
    mode: str
    mean_ms_per_step: float
    p50: float
    p95: float


class BenchResponse(BaseModel):
    rows: list[BenchRow]
    csv: str


class GenerateResponse(BaseModel):
    tokens: list[int]
    text_hex: str
    row: ResultRow
