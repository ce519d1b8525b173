"""
Pydantic models for disorder specifications and the JSON reports of the lab
"""
import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, model_validator

MOMENT_TOLERANCE = 1e-12


class DisorderLaw(str, Enum):
    """Supported laws of the IID coupling entries"""
    GAUSSIAN = "gaussian"
    RADEMACHER = "rademacher"
    CUSTOM = "custom"


LAW_TAGS: Dict[DisorderLaw, int] = {
    DisorderLaw.GAUSSIAN: 0,
    DisorderLaw.RADEMACHER: 1,
    DisorderLaw.CUSTOM: 2,
}


class DisorderSpec(BaseModel):
    """Reproducible description of one coupling matrix"""
    law: DisorderLaw = Field(default=DisorderLaw.GAUSSIAN, description="Law of the IID entries")
    n: int = Field(..., ge=1, description="System size N")
    master_seed: int = Field(default=0, ge=0, lt=2**64, description="Master seed (64-bit unsigned)")
    instance_index: int = Field(default=0, ge=0, lt=2**64, description="Instance index within the master seed")
    custom_table: Optional[List[Tuple[float, float]]] = Field(
        None, description="(value, probability) pairs of a discrete law; required for law=custom"
    )

    @model_validator(mode="after")
    def _check_table(self) -> "DisorderSpec":
        if self.law != DisorderLaw.CUSTOM:
            if self.custom_table is not None:
                raise ValueError("custom_table is only allowed with law=custom")
            return self
        if not self.custom_table:
            raise ValueError("law=custom needs a non-empty custom_table")
        probs = [p for _, p in self.custom_table]
        if any(p < 0 or not math.isfinite(p) for p in probs):
            raise ValueError("custom_table probabilities must be finite and non-negative")
        if abs(math.fsum(probs) - 1.0) > MOMENT_TOLERANCE:
            raise ValueError(f"custom_table probabilities sum to {math.fsum(probs)}, expected 1")
        moments = self.moments()
        if abs(moments["mean"]) > MOMENT_TOLERANCE:
            raise ValueError(f"custom_table mean is {moments['mean']}, expected 0")
        if abs(moments["variance"] - 1.0) > MOMENT_TOLERANCE:
            raise ValueError(f"custom_table variance is {moments['variance']}, expected 1")
        return self

    @property
    def law_tag(self) -> int:
        return LAW_TAGS[self.law]

    def moments(self) -> Dict[str, float]:
        """Mean, variance, third absolute moment and fourth moment of the entry law"""
        if self.law == DisorderLaw.GAUSSIAN:
            return {"mean": 0.0, "variance": 1.0, "third_abs": 2.0 * math.sqrt(2.0 / math.pi), "fourth": 3.0}
        if self.law == DisorderLaw.RADEMACHER:
            return {"mean": 0.0, "variance": 1.0, "third_abs": 1.0, "fourth": 1.0}
        table = self.custom_table or []
        mean = math.fsum(v * p for v, p in table)
        return {
            "mean": mean,
            "variance": math.fsum((v - mean) ** 2 * p for v, p in table),
            "third_abs": math.fsum(abs(v - mean) ** 3 * p for v, p in table),
            "fourth": math.fsum((v - mean) ** 4 * p for v, p in table),
        }


class MatrixSummary(BaseModel):
    """Summary of a sampled coupling matrix"""
    spec: DisorderSpec
    op_norm: float = Field(..., description="Operator norm of the symmetrized coupling")
    entry_mean: float
    entry_variance: float
    moments: Dict[str, float] = Field(..., description="Moments of the entry law")


class GappedStateRecord(BaseModel):
    """JSON form of a gapped-state report"""
    config_hex: str = Field(..., description="Configuration, hex bit string with LSB = site 0")
    n: int
    min_gap: float
    gamma: float
    delta: float
    below_count: int
    verdict: bool
    is_local_max: bool
    budget_used: int
    seed: Optional[int] = None
    energy: Optional[float] = None


class EscapeStatsRecord(BaseModel):
    """JSON form of escape-time statistics"""
    reference_hex: str
    beta: float
    rho: float
    radius: int
    cap: int
    samples: List[int] = Field(..., description="Exit step counts of uncensored runs")
    censored_count: int
    median: Optional[float] = None
    mean: Optional[float] = None


class SpectralRecord(BaseModel):
    """JSON form of a spectral report"""
    n: int
    beta: float
    gap: float
    t_rel: float
    method: str
    residual: float


class MixingCurveRecord(BaseModel):
    """JSON form of an exact mixing curve"""
    n: int
    beta: float
    epsilon: float
    times: List[int]
    distances: List[float]
    t_mix: Optional[int] = None
    censored: bool = False
    start: str = Field(default="worst", description="'worst' for max over starts, 'uniform' for uniform start")


class RestrictedNormRecord(BaseModel):
    """JSON form of a restricted operator norm report"""
    rho: float
    mode: str
    subset: List[int]
    norm: float
    scaled_norm: float = Field(..., description="sqrt(N) * norm, the G + G^T scale")
    bound_rhs: float
    constant: float
    fitted_constant: float = Field(..., description="scaled_norm / sqrt(rho log(1/rho) N)")
    evaluations: int


class SphereGapRecord(BaseModel):
    """JSON form of a sphere energy-gap report"""
    rho: float
    distance: int
    reference_hex: str
    mode: str
    visited: int
    min_drop: float
    first_order: float
    second_order: float
    lemma_rhs: float
    field_norm: float
    field_norm_bound: float
    field_norm_ok: bool
    first_order_floor: float
    quadratic_bound: float
    argmin_flips: List[int]
    identity_residual: float = Field(0.0, description="|direct energy drop - (first_order - second_order)| at the argmin")


class BottleneckRecord(BaseModel):
    """JSON form of a Gibbs bottleneck report"""
    beta: float
    rho: float
    radius: int
    reference_hex: str
    mode: str
    log_ratio: float
    log_ratio_stderr: float = 0.0
    log_bound: float
    ball_mass: Optional[float] = None
    max_sphere_energy: Optional[float] = None


class PipelineStep(BaseModel):
    """One step of the theorem pipeline with its margin"""
    name: str
    passed: bool
    value: float
    threshold: float
    margin: float
    note: str = ""


class PipelineRecord(BaseModel):
    """Consolidated verdict of the theorem pipeline for one instance"""
    n: int
    beta: float
    gamma: float
    delta: float
    rho: float
    reference_hex: str
    steps: List[PipelineStep]
    hypotheses_met: bool
    certified: bool
    conductance: float
    log_lower_bound: float = Field(..., description="-log(2 * conductance of the ball), a lower bound on log t_rel")
    t_rel: Optional[float] = None
    cheeger_consistent: Optional[bool] = None
    verdict: str


class CheegerRecord(BaseModel):
    """JSON form of a scanned-cut Cheeger check"""
    n: int
    beta: float
    gap: float
    phi_star: float = Field(..., description="Smallest conductance over the scanned cuts, an upper bound on the true one")
    best_cut: str
    cuts_scanned: int
    upper_ok: bool = Field(..., description="gap <= 2 * phi_star")
    lower_ok: bool = Field(..., description="gap >= phi_star^2 / 2")
    verdict: str


class QuadraticFormRecord(BaseModel):
    """JSON form of a ternary restricted quadratic form report"""
    rho: float
    mode: str
    support: List[int]
    signs: List[int]
    value: float = Field(..., description="|<x, A x>| at the best ternary vector")
    scaled_value: float = Field(..., description="sqrt(N) * value, the G + G^T scale")
    evaluations: int
