import logging
import time

from fastapi import APIRouter, HTTPException
from pydantic import ValidationError

from .. import __version__
from ..config import get_settings
from ..models.api_models import (
    ErrorResponse,
    GappedRequest,
    GappedResponse,
    HealthResponse,
    InstanceRequest,
    PipelineRequest,
    PipelineResponse,
    SampleRequest,
    SpectralRequest,
    SpectralResponse,
)
from ..models.lab_models import DisorderSpec, MatrixSummary
from ..services import bounds, gapped, spectral
from ..services.disorder import SymmetricCoupling, sample_disorder, symmetrize
from ..services.model import SpinConfiguration
from ..utils.errors import ConfigError, LabError

logger = logging.getLogger(__name__)
router = APIRouter()


def _spec(request: InstanceRequest) -> DisorderSpec:
    try:
        return DisorderSpec(
            law=request.law,
            n=request.n,
            master_seed=request.master_seed,
            instance_index=request.instance_index,
            custom_table=request.custom_table,
        )
    except ValidationError as e:
        raise ConfigError(f"invalid disorder spec: {e}") from e


def _coupling(request: InstanceRequest) -> SymmetricCoupling:
    return symmetrize(sample_disorder(_spec(request)))


def _lab_error(trace_id: str, e: LabError) -> HTTPException:
    logger.error(f"[{trace_id}] {type(e).__name__}: {e}")
    return HTTPException(
        status_code=e.status_code,
        detail=ErrorResponse(
            error=str(e),
            trace_id=trace_id,
            details={"type": type(e).__name__},
        ).model_dump(mode="json"),
    )


@router.post("/sample", response_model=MatrixSummary)
def sample(request: SampleRequest) -> MatrixSummary:
    """Sample one coupling matrix and summarize it"""
    trace_id = f"sample_{int(time.time() * 1000)}"
    try:
        G = sample_disorder(_spec(request))
        A = symmetrize(G)
        return MatrixSummary(
            spec=G.spec,
            op_norm=A.op_norm(),
            entry_mean=float(G.entries.mean()),
            entry_variance=float(G.entries.var()),
            moments=G.spec.moments(),
        )
    except LabError as e:
        raise _lab_error(trace_id, e)


@router.post("/gapped", response_model=GappedResponse)
def gapped_state(request: GappedRequest) -> GappedResponse:
    """Search for a (gamma, delta)-gapped state of one instance"""
    trace_id = f"gapped_{int(time.time() * 1000)}"
    try:
        A = _coupling(request)
        report = gapped.search_gapped(A, request.gamma, request.delta, request.budget, seed=request.master_seed)
        response = GappedResponse(report=report.to_record())
        if request.enumerate_maxima:
            maxima = gapped.enumerate_local_maxima(A)
            response.local_maxima = len(maxima.maxima)
            response.maximin = maxima.maximin()
        logger.info(f"[{trace_id}] N={request.n} verdict={report.verdict} min_gap={report.min_gap:.4f}")
        return response
    except LabError as e:
        raise _lab_error(trace_id, e)


@router.post("/spectral", response_model=SpectralResponse)
def spectral_gap(request: SpectralRequest) -> SpectralResponse:
    """Spectral gap of the exact Glauber kernel, with optional mixing curve and Cheeger check"""
    trace_id = f"spectral_{int(time.time() * 1000)}"
    try:
        A = _coupling(request)
        P = spectral.build_transition(A, request.beta)
        report = spectral.spectral_gap(P, request.method)
        response = SpectralResponse(spectral=report.to_record())
        if request.include_mixing:
            response.mixing = spectral.mixing_time_exact(P, request.epsilon).to_record()
        if request.include_cheeger:
            response.cheeger = spectral.cheeger_check(P, report.gap).to_record()
        logger.info(f"[{trace_id}] N={request.n} beta={request.beta} gap={report.gap:.6g}")
        return response
    except LabError as e:
        raise _lab_error(trace_id, e)


@router.post("/bounds/pipeline", response_model=PipelineResponse)
def pipeline(request: PipelineRequest) -> PipelineResponse:
    """Run the bottleneck pipeline on one instance"""
    trace_id = f"pipeline_{int(time.time() * 1000)}"
    try:
        A = _coupling(request)
        reference = SpinConfiguration.from_hex(request.reference_hex, request.n) if request.reference_hex else None
        result = bounds.theorem_pipeline(
            A, request.beta, request.gamma, request.delta, request.rho,
            reference=reference, budget=request.budget, seed=request.master_seed,
        )
        return PipelineResponse(record=result.record, summary=result.summary())
    except LabError as e:
        raise _lab_error(trace_id, e)


@router.get("/health", response_model=HealthResponse)
async def health_check() -> HealthResponse:
    """Health check with the configured size gates"""
    settings = get_settings()
    try:
        import numba

        accelerator = {"status": "healthy", "numba": numba.__version__}
    except ImportError as e:
        logger.warning(f"numba unavailable: {e}")
        accelerator = {"status": "unhealthy", "error": str(e)}
    return HealthResponse(
        status="healthy" if accelerator["status"] == "healthy" else "degraded",
        version=__version__,
        services={
            "kernels": accelerator,
            "gates": {
                "enumeration_max_n": settings.enumeration_max_n,
                "transition_max_n": settings.transition_max_n,
                "dense_max_n": settings.dense_max_n,
                "cheeger_max_n": settings.cheeger_max_n,
                "local_maxima_max_n": settings.local_maxima_max_n,
                "subset_budget": settings.subset_budget,
            },
        },
    )
