"""
Lab settings loaded from the environment and an optional .env file
"""
from functools import lru_cache
from pathlib import Path

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment variables
load_dotenv()


class LabSettings(BaseSettings):
    """Runtime settings; every field can be overridden with SKLAB_<NAME>"""

    model_config = SettingsConfigDict(env_prefix="SKLAB_", env_file=".env", extra="ignore")

    master_seed: int = Field(default=20240601, ge=0, lt=2**64, description="Default master seed")
    threads: int = Field(default=1, ge=1, description="Worker pool size for instance-level parallelism")
    out_dir: Path = Field(default=Path("runs"), description="Default output directory")
    log_level: str = Field(default="INFO", description="Root logging level")

    enumeration_max_n: int = Field(default=25, description="Gate for 2^N partition sums")
    transition_max_n: int = Field(default=20, description="Gate for exact transition matrices")
    dense_max_n: int = Field(default=12, description="Gate for dense eigensolvers and exact mixing curves")
    cheeger_max_n: int = Field(default=10, description="Gate for the scanned-cut Cheeger check")
    local_maxima_max_n: int = Field(default=20, description="Gate for local-maximum enumeration")
    subset_budget: int = Field(default=10**7, description="Gate for exhaustive subset scans")

    power_iteration_max_iter: int = Field(default=20000, description="Iteration cap for operator norms")


@lru_cache(maxsize=1)
def get_settings() -> LabSettings:
    """Load and cache the settings"""
    return LabSettings()
