"""
SK Spin-Glass Lab
Main FastAPI application entry point
"""
import logging
from datetime import datetime

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from . import __version__
from .api.lab import router as lab_router
from .config import get_settings
from .utils.errors import LabError

# Setup logging
logging.basicConfig(
    level=get_settings().log_level.upper(),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="SK Spin-Glass Lab",
    description="Disorder sampling, gapped states, Glauber dynamics, spectral gaps and bottleneck bounds for the SK model",
    version=__version__,
    docs_url="/docs",
    redoc_url="/redoc",
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.include_router(lab_router, prefix="/api", tags=["lab"])


@app.get("/", include_in_schema=False)
async def root():
    """Root endpoint"""
    return JSONResponse(
        content={
            "app": "SK Spin-Glass Lab",
            "version": __version__,
            "status": "running",
            "timestamp": datetime.utcnow().isoformat(),
            "docs": "/docs",
            "endpoints": {
                "sample": "/api/sample",
                "gapped": "/api/gapped",
                "spectral": "/api/spectral",
                "pipeline": "/api/bounds/pipeline",
                "health": "/health",
                "api_health": "/api/health",
            },
        }
    )


@app.get("/health", tags=["health"])
async def health_check():
    """Health check endpoint"""
    return {"status": "healthy", "timestamp": datetime.utcnow().isoformat()}


@app.exception_handler(LabError)
async def lab_exception_handler(request, exc: LabError):
    """Lab errors that escaped a route keep their status code"""
    logger.error(f"Lab error on {request.url}: {exc}")
    return JSONResponse(
        status_code=exc.status_code,
        content={"error": type(exc).__name__, "message": str(exc), "timestamp": datetime.utcnow().isoformat()},
    )


@app.exception_handler(Exception)
async def global_exception_handler(request, exc):
    """Global exception handler for unhandled errors"""
    logger.error(f"Global exception on {request.url}: {str(exc)}")
    return JSONResponse(
        status_code=500,
        content={
            "error": "Internal server error",
            "message": "An unexpected error occurred",
            "timestamp": datetime.utcnow().isoformat(),
        },
    )


if __name__ == "__main__":
    import uvicorn

    uvicorn.run("app.main:app", host="0.0.0.0", port=8001, reload=True)
