"""
Pydantic models for declarative experiments: configs, run records and scaling fits
"""
import hashlib
import json
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app import __version__
from app.config import get_settings
from app.models.lab_models import DisorderLaw, MixingCurveRecord
from app.utils.errors import ConfigError, require_gate


# Fields that change where or how fast a run executes, never its rows
EXECUTION_FIELDS = {"threads", "out_dir"}


class ExperimentKind(str, Enum):
    SCALING_STUDY = "scaling_study"
    FREE_ENERGY = "free_energy"
    BOTTLENECK_PIPELINE = "bottleneck_pipeline"
    ESCAPE_STUDY = "escape_study"
    RESTRICTED_NORM_STUDY = "restricted_norm_study"


class ReferenceChoice(str, Enum):
    """How the reference state sigma* of an instance is chosen"""
    DEEPEST = "deepest"
    SEARCH = "search"


class ExperimentConfig(BaseModel):
    """Declarative description of one experiment, stored as YAML"""
    kind: ExperimentKind = Field(..., description="Experiment kind")
    name: str = Field(default="experiment", description="Label used in output file names")
    law: DisorderLaw = Field(default=DisorderLaw.GAUSSIAN, description="Disorder law")
    laws: List[DisorderLaw] = Field(default_factory=list, description="Laws compared by restricted_norm_study (law alone when empty)")
    n_list: List[int] = Field(..., min_length=1, description="System sizes")
    beta_list: List[float] = Field(default_factory=lambda: [1.0], description="Inverse temperatures")
    instance_count: int = Field(default=1, ge=1, description="Instances per size")
    master_seed: int = Field(default=0, ge=0, lt=2**64, description="Master seed of every stream")
    threads: int = Field(default=1, ge=1, description="Instance-level worker threads")

    gamma: float = Field(default=0.5, gt=0, description="Gap level")
    delta: float = Field(default=0.0, ge=0, lt=1, description="Allowed fraction of sites below gamma")
    rho: float = Field(default=0.25, gt=0, lt=0.5, description="Sphere/ball radius fraction")
    rho_list: List[float] = Field(default_factory=list, description="Radius fractions of restricted_norm_study")
    reference: ReferenceChoice = Field(default=ReferenceChoice.DEEPEST, description="Choice of sigma*")
    search_budget: int = Field(default=200_000, ge=1, description="Flip evaluations of search_gapped")

    spectral_method: Optional[str] = Field(None, description="dense or iterative (by size when None)")
    include_mixing: bool = Field(default=False, description="Exact worst-start and uniform-start mixing times")
    epsilon: float = Field(default=0.25, gt=0, lt=0.5, description="TV threshold of mixing times")
    include_gapped: bool = Field(default=False, description="Record the searched minimum gap (and exact maximin when enumerable)")

    reps: int = Field(default=100, ge=0, description="Escape replicates per start")
    cap: int = Field(default=10**7, ge=1, description="Escape step cap")
    uniform_starts: int = Field(default=0, ge=0, description="Additional uniform starts of escape_study")

    norm_mode: str = Field(default="heuristic", description="exact or heuristic restricted norm")
    norm_budget: int = Field(default=100_000, ge=1, description="Norm evaluations per heuristic run")
    norm_restarts: Optional[int] = Field(None, ge=1, description="Heuristic restarts (budget-limited when None)")
    norm_constant: float = Field(default=6.0, gt=0, description="C of the restricted norm comparison")
    include_quadratic_form: bool = Field(default=False, description="Also run restricted_quadratic_form")

    out_dir: Path = Field(default=Path("runs"), description="Output directory")

    @field_validator("n_list")
    @classmethod
    def _sizes(cls, value: List[int]) -> List[int]:
        if any(n < 2 for n in value):
            raise ValueError(f"every N must be at least 2, got {value}")
        return value

    @field_validator("spectral_method")
    @classmethod
    def _method(cls, value: Optional[str]) -> Optional[str]:
        if value not in (None, "dense", "iterative"):
            raise ValueError(f"spectral_method must be dense or iterative, got {value}")
        return value

    @field_validator("norm_mode")
    @classmethod
    def _norm_mode(cls, value: str) -> str:
        if value not in ("exact", "heuristic"):
            raise ValueError(f"norm_mode must be exact or heuristic, got {value}")
        return value

    @model_validator(mode="after")
    def _gates(self) -> "ExperimentConfig":
        """Every exact computation the run will request must fit its gate now"""
        settings = get_settings()
        n_max = max(self.n_list)
        kind = self.kind
        if kind == ExperimentKind.SCALING_STUDY:
            require_gate("scaling_study", n_max, settings.transition_max_n)
            if self.spectral_method == "dense" or self.include_mixing:
                require_gate("scaling_study[dense]", n_max, settings.dense_max_n)
            if self.include_gapped and self.reference == ReferenceChoice.DEEPEST:
                require_gate("scaling_study[local maxima]", n_max, settings.local_maxima_max_n)
        elif kind == ExperimentKind.FREE_ENERGY:
            require_gate("free_energy", n_max, settings.enumeration_max_n)
        elif kind == ExperimentKind.BOTTLENECK_PIPELINE:
            require_gate("bottleneck_pipeline", n_max, settings.transition_max_n)
            if self.reference == ReferenceChoice.DEEPEST:
                require_gate("bottleneck_pipeline[local maxima]", n_max, settings.local_maxima_max_n)
        elif kind == ExperimentKind.ESCAPE_STUDY:
            if self.reference == ReferenceChoice.DEEPEST:
                require_gate("escape_study[local maxima]", n_max, settings.local_maxima_max_n)
            if min(self.n_list) * self.rho < 1:
                raise ValueError(f"rho * N < 1 for N={min(self.n_list)}, rho={self.rho}")
        elif kind == ExperimentKind.RESTRICTED_NORM_STUDY:
            for rho in self.rho_values:
                if not 0 < rho < 0.5:
                    raise ValueError(f"rho must lie in (0, 1/2), got {rho}")
                for n in self.n_list:
                    k = math.floor(rho * n + 1e-12)
                    if k < 1:
                        raise ValueError(f"floor(rho N) = 0 for rho={rho}, N={n}")
                    if self.norm_mode == "exact":
                        cost = sum(math.comb(n, s) for s in range(1, k + 1))
                        require_gate("restricted_norm_study[exact]", cost, settings.subset_budget)
        if any(b < 0 or not math.isfinite(b) for b in self.beta_list):
            raise ValueError(f"inverse temperatures must be finite and non-negative, got {self.beta_list}")
        return self

    @property
    def rho_values(self) -> List[float]:
        return self.rho_list or [self.rho]

    @property
    def law_values(self) -> List[DisorderLaw]:
        return self.laws or [self.law]

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form without execution-only fields, first 16 hex digits"""
        canonical = json.dumps(self.model_dump(mode="json", exclude=EXECUTION_FIELDS), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as e:
            raise ConfigError(f"experiment config is not valid YAML: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("experiment config must be a YAML mapping")
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"invalid experiment config: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"experiment config {path} does not exist")
        return cls.from_yaml(path.read_text(encoding="utf-8"))

    def dump(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_yaml(), encoding="utf-8")
        return path


class ScalingFit(BaseModel):
    """Least-squares fit log t_rel = a + b N^alpha for a fixed alpha"""
    alpha: float
    label: str = Field(..., description="'1/3' or '1'")
    a: float
    b: float
    rss: float = Field(..., description="Residual sum of squares")
    n_points: int


class ScalingFitPair(BaseModel):
    """Stretched-exponential and exponential fits of the same medians"""
    beta: Optional[float] = None
    sizes: List[int]
    medians: List[float] = Field(..., description="Median over instances of log t_rel per size")
    third: ScalingFit
    linear: ScalingFit
    preferred: Optional[str] = Field(None, description="Label of the smaller-residual model, None when no winner")
    separation: Optional[float] = Field(None, description="Larger RSS over smaller RSS (None when the smaller is zero)")


class RunRecord(BaseModel):
    """Result of one experiment run; everything except timing is a pure function of config and version"""
    kind: ExperimentKind
    config_hash: str
    version: str = Field(default=__version__, description="Lab version that produced the rows")
    config: ExperimentConfig
    instances: List[str] = Field(default_factory=list, description="Instance identifiers in row order")
    rows: List[Dict[str, Any]] = Field(default_factory=list)
    summary: Dict[str, Any] = Field(default_factory=dict, description="Kind-specific aggregates")
    fits: List[ScalingFitPair] = Field(default_factory=list)
    curves: List[MixingCurveRecord] = Field(default_factory=list, description="Mixing curves for plots")
    gap_profiles: Dict[str, List[float]] = Field(default_factory=dict, description="Gap profiles of reference states")
    complete: bool = False
    timing: Dict[str, float] = Field(default_factory=dict, description="Wall-clock metadata, excluded from determinism")

    def metrics_view(self) -> Dict[str, Any]:
        """Everything but the timing block"""
        return self.model_dump(mode="json", exclude={"timing"})
