"""Experiment configuration: one YAML file, validated before any computation."""
from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError

KINDS = ("simulate", "solve", "risk-equivalence", "mp-check", "spike", "invest", "filter")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Strict):
    name: str
    params: dict = Field(default_factory=dict)


class EnsembleSection(_Strict):
    n_paths: int = Field(10_000, ge=1)
    seed: int = 0
    antithetic: bool = False


class BasisSection(_Strict):
    degree: int = Field(3, ge=0, le=8)
    ridge: float = Field(1e-8, ge=0)
    features: Optional[list[str]] = None


class ScanSection(_Strict):
    every: int = Field(10, ge=1)
    lag: int = Field(10, ge=1)
    degree: int = Field(2, ge=0, le=6)


class SpikeSection(_Strict):
    u: Optional[float] = None
    t_bar: float = Field(0.25, ge=0)
    eps_ladder: Optional[list[float]] = None
    predictor: bool = True


class InvestSection(_Strict):
    u: Optional[float] = None
    relations: bool = True
    scan_grid: Optional[list[float]] = None


class FilterSection(_Strict):
    record: Optional[str] = None
    n_particles: int = Field(20_000, ge=2)
    x_min: float = -4.0
    x_max: float = 4.0
    n_x: int = Field(241, ge=5)
    init_width_cells: float = Field(2.0, ge=0)
    grid: bool = True
    snapshots: list[float] = Field(default_factory=list)
    tower: bool = False
    n_obs: int = Field(200, ge=2)
    tower_particles: int = Field(500, ge=2)
    n_direct: int = Field(100_000, ge=2)


class Tolerances(_Strict):
    z: float = Field(3.0, gt=0)
    bias_band: float = Field(0.0, ge=0)
    closed_form_rel: float = Field(2e-2, gt=0)
    martingale_z: float = Field(4.0, gt=0)
    residual: float = Field(5e-3, ge=0)
    slope_lo: float = 0.85
    slope_hi: float = 1.15
    p_alpha_r: float = Field(5e-2, gt=0)
    alpha_agreement: float = Field(1e-2, gt=0)
    grid_band_rel: float = Field(1e-2, ge=0)


class ExperimentConfig(_Strict):
    kind: Literal["simulate", "solve", "risk-equivalence", "mp-check", "spike", "invest", "filter"]
    model: ModelSection
    theta: Optional[float] = None
    ensemble: EnsembleSection = Field(default_factory=EnsembleSection)
    basis: BasisSection = Field(default_factory=BasisSection)
    policy: Optional[dict] = None
    scan: ScanSection = Field(default_factory=ScanSection)
    spike: SpikeSection = Field(default_factory=SpikeSection)
    invest: InvestSection = Field(default_factory=InvestSection)
    filter: FilterSection = Field(default_factory=FilterSection)
    tolerances: Tolerances = Field(default_factory=Tolerances)
    output: Optional[str] = None

    @field_validator("theta")
    @classmethod
    def _theta_positive(cls, v):
        if v is not None and not v > 0:
            raise ValueError("theta must be > 0")
        return v


def _format(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(a) for a in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def validate(d: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(d)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format(exc)}") from None


def load(path) -> dict:
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"config {path} must be a mapping")
    return d


def _parse_scalar(s: str):
    v = yaml.safe_load(s)
    return v


def apply_overrides(d: dict, sets=()) -> dict:
    """``a.b.c=value`` overrides; values parsed as YAML scalars/lists."""
    d = dict(d)
    for item in sets:
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not key=value")
        key, val = item.split("=", 1)
        parts = key.strip().split(".")
        cur = d
        for p in parts[:-1]:
            nxt = cur.get(p)
            if nxt is None:
                nxt = cur[p] = {}
            elif not isinstance(nxt, dict):
                raise ConfigError(f"override '{key}': {p} is not a section")
            else:
                nxt = cur[p] = dict(nxt)
            cur = nxt
        cur[parts[-1]] = _parse_scalar(val)
    return d


def resolved(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
