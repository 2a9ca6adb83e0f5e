"""
Core Configuration for cmdp-lab
===============================

Centralized configuration management. Runtime settings come from the
environment (``CMDP_LAB_*`` variables or a ``.env`` file at the project
root); numeric tolerances are fixed in one frozen record so every module
checks invariants against the same thresholds.
"""

import os
from dataclasses import dataclass
from functools import lru_cache

from dotenv import load_dotenv
from pydantic import Field
from pydantic_settings import BaseSettings, SettingsConfigDict

# Load environment from project root
load_dotenv(os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(os.path.dirname(__file__)))), ".env"))


class Settings(BaseSettings):
    """Application settings with environment variable support."""

    model_config = SettingsConfigDict(env_prefix="CMDP_LAB_", env_file=".env", case_sensitive=False, extra="ignore")

    # Application
    app_name: str = "cmdp-lab"
    app_version: str = "1.0.0"
    environment: str = "development"
    log_level: str = "info"

    # Execution
    threads: int = Field(default=1, ge=1, description="Worker pool cap for seed sweeps")
    output_dir: str = "./runs"

    # Solvers
    lp_backend: str = Field(default="simplex", pattern=r"^(simplex|highs)$")
    checkpoint_count: int = Field(default=100, ge=1)
    round_cap: int = Field(default=60, ge=1, description="Doubling rounds before the adaptive driver gives up")
    strict_eta_cap: bool = False


@dataclass(frozen=True)
class NumericConfig:
    """Tolerances shared by every invariant check."""

    # Model validation
    STOCHASTIC_TOL: float = 1e-12
    BOUND_TOL: float = 1e-12

    # Occupancy algebra
    FLOW_TOL: float = 1e-9
    MASS_TOL: float = 1e-9
    ZERO_MASS: float = 1e-15

    # LP oracle
    SIMPLEX_FEAS_TOL: float = 1e-9
    LP_OPT_TOL: float = 1e-8
    SIMPLEX_MAX_ITER: int = 50_000
    OPTIMAL_FACE_SLACK: float = 1e-9

    # DPDL subproblems
    KKT_TOL: float = 1e-8
    BISECT_FTOL: float = 1e-12
    BISECT_MAX_ITER: int = 200
    FEASIBILITY_SLACK: float = 1e-9

    # Markov diagnostics
    STATIONARY_TOL: float = 1e-10
    MIXING_POWER_CAP: int = 100_000
    MIXING_THRESHOLD: float = 0.25


@lru_cache()
def get_settings() -> Settings:
    """Get cached application settings."""
    return Settings()


@lru_cache()
def get_numeric_config() -> NumericConfig:
    """Get cached numeric tolerances."""
    return NumericConfig()
