"""
Experiment configuration: JSON files validated into pydantic models.

The resolved config (defaults filled in) and its content hash are embedded in
every report so that a run can be reproduced from its own output.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.errors import ConfigurationError
from services.geometry import MaskedGrid, build_grid, parse_domain
from services.model import (
    BOUNDARY_PRESETS,
    COEFFICIENT_PRESETS,
    SEMILINEAR_PRESETS,
    Problem,
    boundary_data_from_preset,
    coefficients_from_preset,
    semilinear_from_preset,
)
from utils.versioning import SCHEMA_VERSION, format_version_display, is_newer_version, parse_version

logger = logging.getLogger(__name__)

EXPERIMENT_KINDS = ("quasipotential", "parabolic", "stationary", "montecarlo", "certify", "regimes")
DEFAULT_PROBES = [[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]]


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _known(value: str, known, what: str) -> str:
    if value not in known:
        raise ValueError(f"unknown {what} preset '{value}' (known: {', '.join(sorted(known))})")
    return value


# ---------------------------------------------------------------------------
# Problem block
# ---------------------------------------------------------------------------

class CoefficientsConfig(_Block):
    preset: str = "isotropic_quadratic"

    @field_validator("preset")
    @classmethod
    def _preset_exists(cls, v: str) -> str:
        return _known(v, COEFFICIENT_PRESETS, "coefficient")


class BoundaryDataConfig(_Block):
    preset: str = "x1_squared"
    value: Optional[float] = None

    @field_validator("preset")
    @classmethod
    def _preset_exists(cls, v: str) -> str:
        return _known(v, BOUNDARY_PRESETS, "boundary data")


class SemilinearConfig(_Block):
    preset: str = "tanh"
    M_scale: float = Field(1.0, ge=0.0)

    @field_validator("preset")
    @classmethod
    def _preset_exists(cls, v: str) -> str:
        return _known(v, SEMILINEAR_PRESETS, "semilinear")


class ProblemConfig(_Block):
    domain: str = "ball:1"
    coefficients: CoefficientsConfig = Field(default_factory=CoefficientsConfig)
    boundary_data: BoundaryDataConfig = Field(default_factory=BoundaryDataConfig)
    semilinear: Optional[SemilinearConfig] = None

    @field_validator("domain")
    @classmethod
    def _domain_parses(cls, v: str) -> str:
        try:
            parse_domain(v)
        except Exception as e:
            raise ValueError(str(e)) from e
        return v


# ---------------------------------------------------------------------------
# Numerical blocks
# ---------------------------------------------------------------------------

class GridConfig(_Block):
    h: float = Field(1.0 / 64.0, gt=0.0)
    stencil_order: int = Field(2, ge=1, le=3)
    min_nodes_across: int = Field(16, ge=3)


class TimeGridConfig(_Block):
    t_min: float = Field(0.01, gt=0.0)
    n_steps: int = Field(400, ge=8)
    sigma_cutoff: Literal["inverse", "log"] = "inverse"
    horizon_factor: float = Field(1.05, ge=1.0)


class MonteCarloConfig(_Block):
    n_traj: int = Field(1000, ge=1)
    dt: float = Field(1e-3, gt=0.0, le=1e-2)
    seed: int = Field(0, ge=0)
    max_steps: int = Field(10 ** 9, ge=1)
    x0: Tuple[float, float] = (0.0, 0.0)
    delta: float = Field(0.6, gt=0.0)
    window_delta: float = Field(0.1, gt=0.0)
    batch_size: int = Field(250, ge=1)
    check_dt_halving: bool = False


class AppendixConfig(_Block):
    n_lambda: int = Field(4, ge=1)
    max_boundary_points: Optional[int] = Field(None, ge=1)
    gammas: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05])
    eps: float = Field(0.05, gt=0.0)


class CertificatesConfig(_Block):
    r: float = Field(0.2, gt=0.0)
    mu: float = Field(0.05, gt=0.0)
    R: float = Field(2.0, gt=0.0)
    ramp_width: float = Field(1.0, gt=0.0)
    lambda_exit: float = Field(0.7, gt=0.0)
    eps_barrier: float = Field(0.05, gt=0.0)
    offset_lambda: float = Field(0.005, gt=0.0)
    offset_domain: str = "ellipse:1,0.6"
    appendix: AppendixConfig = Field(default_factory=AppendixConfig)


class TolerancesConfig(_Block):
    regime_i: float = 0.1
    regime_iii: float = 0.1
    regime_ii: float = 0.1
    resolution_gap: float = 0.5
    stationary: float = 0.15
    stationary_near_argmin: float = 0.2
    transport: float = 0.05
    quasipotential: float = 0.03
    boundary_constancy: float = 0.02
    semilinear: float = 0.12
    decay: float = 0.1
    subsolution: float = 0.1
    u_origin: float = 0.02
    u_gamma: float = 0.05
    transfer: float = 0.01
    reduction: float = 1e-8
    concentration: float = 0.7
    uniformity_pvalue: float = 1e-3
    dt_halving: float = 0.05
    slope_relative: float = 0.25
    offset_ratio: float = 0.95


class ExperimentConfig(_Block):
    """Top-level experiment file."""

    schema_version: int = SCHEMA_VERSION
    experiment: Literal["quasipotential", "parabolic", "stationary", "montecarlo", "certify", "regimes"] = "regimes"
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    grid: GridConfig = Field(default_factory=GridConfig)
    eps: List[float] = Field(default_factory=lambda: [0.1, 0.07, 0.05])
    lambdas: List[float] = Field(default_factory=lambda: [0.3, 0.7])
    time_grid: TimeGridConfig = Field(default_factory=TimeGridConfig)
    probes: List[Tuple[float, float]] = Field(default_factory=lambda: [tuple(p) for p in DEFAULT_PROBES])
    transport_times: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    transport_radius: float = Field(0.7, gt=0.0)
    cache_dir: Optional[str] = ".metastab_cache"
    montecarlo: MonteCarloConfig = Field(default_factory=MonteCarloConfig)
    certificates: CertificatesConfig = Field(default_factory=CertificatesConfig)
    tolerances: TolerancesConfig = Field(default_factory=TolerancesConfig)
    workers: int = Field(1, ge=1)
    output: str = "out"

    @field_validator("schema_version")
    @classmethod
    def _supported_schema(cls, v: int) -> int:
        if is_newer_version(SCHEMA_VERSION, v):
            raise ValueError(
                f"config schema {format_version_display(v)} is newer than the supported "
                f"{format_version_display(SCHEMA_VERSION)}"
            )
        if parse_version(v) != parse_version(SCHEMA_VERSION):
            raise ValueError(f"config schema {format_version_display(v)} is no longer supported "
                             f"(expected {format_version_display(SCHEMA_VERSION)})")
        return v

    @field_validator("eps")
    @classmethod
    def _positive_eps(cls, v: List[float]) -> List[float]:
        if not v:
            raise ValueError("at least one noise level is required")
        if any(e <= 0 for e in v):
            raise ValueError(f"noise levels must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def _probes_inside(self) -> "ExperimentConfig":
        domain = parse_domain(self.problem.domain)
        for p in self.probes:
            if domain.rho([list(p)])[0] >= 0:
                raise ValueError(f"probe {list(p)} is not inside {self.problem.domain}")
        return self


# ---------------------------------------------------------------------------
# Loading and provenance
# ---------------------------------------------------------------------------

def _format_errors(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid config: {_format_errors(e)}") from e


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    path = Path(path)
    try:
        with path.open("r", encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    cfg = parse_config(data)
    logger.info(f"Loaded {cfg.experiment} config from {path} (hash {config_hash(cfg)[:12]})")
    return cfg


def resolved_config(cfg: ExperimentConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json")


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def hash_payload(payload: Any) -> str:
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    return hash_payload(resolved_config(cfg))


def with_overrides(cfg: ExperimentConfig, **updates: Any) -> ExperimentConfig:
    """Validated copy with top-level fields replaced."""
    data = resolved_config(cfg)
    data.update(updates)
    return parse_config(data)


# ---------------------------------------------------------------------------
# Building problems
# ---------------------------------------------------------------------------

def build_problem(block: ProblemConfig) -> Problem:
    semilinear = None
    if block.semilinear is not None:
        semilinear = semilinear_from_preset(block.semilinear.preset, block.semilinear.M_scale)
    return Problem(
        parse_domain(block.domain),
        coefficients_from_preset(block.coefficients.preset),
        boundary_data_from_preset(block.boundary_data.preset, block.boundary_data.value),
        semilinear,
    )


def build_config_grid(cfg: ExperimentConfig, problem: Optional[Problem] = None) -> MaskedGrid:
    domain = problem.domain if problem is not None else parse_domain(cfg.problem.domain)
    return build_grid(domain, cfg.grid.h, cfg.grid.min_nodes_across)
