# occupation_lab/config.py
"""
Experiment configuration files.

TOML documents validated by strict pydantic models: unknown keys, wrong
types and infeasible combinations fail before anything is simulated.
OCCUPATION_LAB_SEED replaces the configured seed.
"""
import hashlib
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError, field_validator, model_validator

from .errors import ConfigurationError, LabError
from .functionals import get_functional
from .settings import seed_override

logger = logging.getLogger("occupation-lab.config")


class DomainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    shape: Literal["box", "ball"] = "box"
    r_D: float = Field(1.0, gt=0)


class SolverConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    h: float = Field(0.25, gt=0)
    theta: Literal["closed-form", "estimate"] = "closed-form"
    theta_levels: List[float] = [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]
    theta_replicas: int = Field(20_000, ge=2)
    constraint_tol: float = Field(1e-6, gt=0)


class TiltConfig(BaseModel):
    """Tilt used by the excursion experiments and the spline order of phi_N for every tilt of the run."""
    model_config = ConfigDict(extra="forbid")

    profile: Literal["quasi-minimizer", "radial", "ground-state"] = "quasi-minimizer"
    a: float = Field(0.5, gt=0)
    order: Literal[1, 3, 5] = 3


class ScaffoldConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    mode: Literal["direct", "exponents"] = "direct"
    radii: Optional[List[int]] = [2, 4, 6, 8, 10]
    exponents: Optional[List[float]] = None
    delta_tilde: float = Field(75.0, gt=0)
    eta: float = Field(0.25, gt=0, lt=1)
    x0: Optional[List[int]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if self.mode == "exponents" and self.exponents is None:
            raise ValueError("exponent mode needs scaffold.exponents")
        if self.mode == "direct" and self.radii is None:
            raise ValueError("direct mode needs scaffold.radii")
        return self


class ExcursionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(16, ge=2)
    replicas: int = Field(200, ge=1)
    delta: float = Field(0.1, gt=0, lt=1)
    alpha: float = Field(0.01, gt=0, lt=1)
    control: bool = True
    control_factor: float = Field(1.5, gt=1)
    swap_replicas: Optional[int] = Field(None, ge=1)
    start: Optional[List[int]] = None
    tv_start: Optional[List[int]] = None
    tv_times: List[float] = [1.0, 10.0, 100.0]
    hitting_scales: Optional[List[int]] = None

    @field_validator("hitting_scales")
    @classmethod
    def _two_scales(cls, value):
        if value is not None and (len(value) != 2 or not 2 <= value[0] < value[1]):
            raise ValueError("hitting_scales needs two increasing scales, each at least 2")
        return value


class ConcentrationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    a: float = Field(0.5, gt=0)
    big_delta: float = Field(0.5, ge=0, alias="Delta")
    delta_sweep: List[float] = Field([0.25, 0.5, 1.0], alias="Delta_sweep")
    gamma: float = Field(2.0, gt=1)
    N: List[int] = [6, 8, 10]
    replicas: int = Field(500, ge=1)
    threshold: float = Field(0.05, gt=0, lt=1)

    @field_validator("delta_sweep")
    @classmethod
    def _sweep(cls, value):
        if any(v < 0 for v in value):
            raise ValueError("Delta_sweep values must be nonnegative")
        return sorted(set(value))


class DirectConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    N: int = Field(8, ge=2)
    replicas: int = Field(10_000, ge=1)
    kill_factor: int = Field(4, ge=2)


class ExperimentConfig(BaseModel):
    """One experiment: domain, functional, levels, scales, replica counts and seed."""
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    experiment: str
    d: int = Field(3, ge=3)
    domain: DomainConfig = DomainConfig()
    functional: str = "F2"
    nu: float = Field(gt=0)
    delta: float = Field(0.1, gt=0, lt=1)
    epsilon: float = Field(0.1, gt=0, lt=1)
    big_r: float = Field(4.5, gt=0, alias="R")
    N: List[int] = [16, 24, 32]
    replicas: int = Field(200, ge=1)
    entropy_replicas: int = Field(200, ge=100)
    seed: int = Field(0, ge=0)
    output: str = "results"
    workers: Optional[int] = Field(None, ge=1)
    event_level: Optional[float] = Field(None, gt=0)
    typicality_threshold: float = Field(0.9, gt=0, lt=1)
    slack: float = Field(0.5, ge=0)
    solver: SolverConfig = SolverConfig()
    tilt: TiltConfig = TiltConfig()
    scaffold: ScaffoldConfig = ScaffoldConfig()
    excursions: ExcursionConfig = ExcursionConfig()
    concentration: ConcentrationConfig = ConcentrationConfig()
    direct: DirectConfig = DirectConfig()

    _source_sha256: Optional[str] = PrivateAttr(default=None)
    _source_text: Optional[str] = PrivateAttr(default=None)

    @field_validator("N")
    @classmethod
    def _scales(cls, value):
        if not value:
            raise ValueError("at least one scale N is required")
        if any(n < 2 for n in value):
            raise ValueError("every scale N must be at least 2")
        return sorted(set(value))

    @model_validator(mode="after")
    def _feasible(self):
        if not self.big_r > 4 * self.domain.r_D:
            raise ValueError(f"R={self.big_r} must exceed 4 r_D = {4 * self.domain.r_D}")
        steps = self.big_r / self.solver.h
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError(f"R={self.big_r} is not a multiple of the grid step h={self.solver.h}")
        try:
            F = get_functional(self.functional, self.d)
        except LabError as e:
            raise ValueError(str(e))
        if F.bounded and not self.nu < F.bound:
            raise ValueError(f"nu={self.nu} is not below sup theta <= {F.bound} for {F.name}")
        if F.name not in ("F1", "F2") and self.solver.theta == "closed-form":
            raise ValueError(f"{F.name} has no closed-form theta; set solver.theta = \"estimate\"")
        return self

    @property
    def source_sha256(self) -> Optional[str]:
        return self._source_sha256

    @property
    def source_text(self) -> Optional[str]:
        return self._source_text


def parse_config(text: Union[str, bytes], origin: str = "<string>") -> ExperimentConfig:
    """Validate a TOML document; every failure becomes a ConfigurationError."""
    raw = text.encode("utf-8") if isinstance(text, str) else text
    try:
        document = tomllib.loads(raw.decode("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as e:
        raise ConfigurationError(f"{origin}: not valid TOML: {str(e)}")
    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigurationError(f"{origin}: {str(e)}")
    override = seed_override()
    if override is not None:
        logger.info(f"Seed {config.seed} replaced by environment seed {override}")
        config = config.model_copy(update={"seed": override})
    config._source_sha256 = hashlib.sha256(raw).hexdigest()
    config._source_text = raw.decode("utf-8")
    return config


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file {path} does not exist")
    config = parse_config(path.read_bytes(), origin=str(path))
    logger.info(f"Loaded experiment {config.experiment!r} from {path} (seed {config.seed})")
    return config
