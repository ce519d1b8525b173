from pydantic import BaseModel, Field
from typing import List, Optional, Dict, Any
from datetime import datetime

from .lab_models import (
    CheegerRecord,
    DisorderLaw,
    GappedStateRecord,
    MixingCurveRecord,
    PipelineRecord,
    SpectralRecord,
)


class InstanceRequest(BaseModel):
    """Fields shared by every request that names a coupling instance"""
    n: int = Field(..., ge=2, le=64, description="System size N")
    law: DisorderLaw = Field(default=DisorderLaw.GAUSSIAN, description="Disorder law")
    master_seed: int = Field(default=0, ge=0, lt=2**64, description="Master seed")
    instance_index: int = Field(default=0, ge=0, description="Instance index")
    custom_table: Optional[List[List[float]]] = Field(None, description="(value, probability) pairs for law=custom")


class SampleRequest(InstanceRequest):
    """Request model for /api/sample"""


class GappedRequest(InstanceRequest):
    """Request model for /api/gapped"""
    gamma: float = Field(default=0.5, gt=0, description="Gap level")
    delta: float = Field(default=0.0, ge=0, lt=1, description="Allowed fraction of sites below gamma")
    budget: int = Field(default=200_000, ge=1, le=10**8, description="Flip evaluations")
    enumerate_maxima: bool = Field(default=False, description="Also enumerate every local maximum (N <= 20)")


class GappedResponse(BaseModel):
    report: GappedStateRecord
    local_maxima: Optional[int] = Field(None, description="Number of local maxima, one per +/- pair")
    maximin: Optional[float] = Field(None, description="Largest minimum gap over the local maxima")


class SpectralRequest(InstanceRequest):
    """Request model for /api/spectral"""
    beta: float = Field(..., ge=0, description="Inverse temperature")
    method: str = Field(default="dense", description="'dense' or 'iterative'")
    include_mixing: bool = Field(default=False, description="Exact worst-start mixing curve (N <= 12)")
    epsilon: float = Field(default=0.25, gt=0, lt=0.5, description="TV threshold")
    include_cheeger: bool = Field(default=False, description="Scanned-cut Cheeger check (N <= 10)")


class SpectralResponse(BaseModel):
    spectral: SpectralRecord
    mixing: Optional[MixingCurveRecord] = None
    cheeger: Optional[CheegerRecord] = None


class PipelineRequest(InstanceRequest):
    """Request model for /api/bounds/pipeline"""
    beta: float = Field(..., ge=0, description="Inverse temperature")
    gamma: float = Field(default=0.5, gt=0)
    delta: float = Field(default=0.0, ge=0, lt=1)
    rho: float = Field(default=0.25, gt=0, lt=0.5, description="Ball radius fraction")
    reference_hex: Optional[str] = Field(None, description="Centre of the ball (searched when omitted)")
    budget: int = Field(default=200_000, ge=1, le=10**8, description="Search budget when reference_hex is omitted")


class PipelineResponse(BaseModel):
    record: PipelineRecord
    summary: str = Field(..., description="Human-readable step table")


class HealthResponse(BaseModel):
    """Health check response"""
    status: str = Field(..., description="Service status")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    services: Dict[str, Any] = Field(..., description="Gates and accelerator status")
    version: str = Field(default="1.0.0", description="API version")


class ErrorResponse(BaseModel):
    """Error response model"""
    error: str = Field(..., description="Error message")
    trace_id: str = Field(..., description="Request trace ID")
    timestamp: datetime = Field(default_factory=datetime.utcnow)
    details: Optional[Dict[str, Any]] = Field(None, description="Additional error details")
