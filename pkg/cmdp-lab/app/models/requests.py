"""
Input Models
============

Pydantic models for solver configurations, instance parameters and the
experiment configuration file.
"""

import math
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .dataset import DatasetMode


class FeasibleRegions(BaseModel):
    """Radii of the V ball, the lambda ball and the x caps for one psi."""

    model_config = ConfigDict(frozen=True)

    psi: float = Field(..., ge=1.0, description="Deviation-control level")
    R_V: float = Field(..., gt=0.0, description="l_inf radius of V")
    R_Lambda: float = Field(..., gt=0.0, description="l_1 radius of lambda")
    x_cap_per_coord: float = Field(..., gt=0.0, description="Cap on x(s,a)/mu_hat(s,a)")
    x_cap_aggregate: float = Field(..., gt=0.0, description="Cap on sum x/mu_hat")
    x_cap_mass: float = Field(..., gt=0.0, description="Cap on sum x")

    @classmethod
    def build(cls, psi: float, phi: float, discount: float, sparsity: int) -> "FeasibleRegions":
        horizon = 1.0 / (1.0 - discount)
        return cls(
            psi=psi,
            R_V=8.0 * (1.0 + 2.0 / phi) * horizon,
            R_Lambda=8.0 / phi,
            x_cap_per_coord=psi * horizon,
            x_cap_aggregate=sparsity * psi * horizon,
            x_cap_mass=4.0 * horizon,
        )


class DpdlConfig(BaseModel):
    """Every constant a DPDL run needs."""

    model_config = ConfigDict(frozen=True)

    T: int = Field(..., ge=0, description="Iteration count")
    epsilon: float = Field(..., gt=0.0, description="Target accuracy")
    delta: float = Field(..., gt=0.0, lt=1.0, description="Failure probability")
    psi: float = Field(..., ge=1.0, description="Deviation-control level")
    phi: float = Field(..., gt=0.0, description="Slater margin")
    kappa: float = Field(..., ge=0.0, description="Constraint conservatism")
    eta: float = Field(..., gt=0.0, description="Stepsize")
    alpha_V: float = Field(..., gt=0.0)
    alpha_lambda: float = Field(..., gt=0.0)
    alpha_x: float = Field(..., gt=0.0)
    N_e: int = Field(..., ge=1, description="Tuples used to estimate mu_hat")
    varsigma: float = Field(..., gt=0.0, description="Floor of mu_hat")
    seed: int = Field(default=0, ge=0)
    eta_cap_satisfied: Optional[bool] = Field(default=None, description="Result of the stepsize cap check")

    def with_overrides(self, **overrides: Any) -> "DpdlConfig":
        """Copy with selected fields replaced; None values are ignored."""
        updates = {key: value for key, value in overrides.items() if value is not None}
        return self.model_copy(update=updates) if updates else self


def _check_signs(values: List[int], allowed: set, name: str) -> List[int]:
    if any(v not in allowed for v in values):
        raise ValueError(f"{name} entries must be in {sorted(allowed)}")
    return values


class HardInstanceParams(BaseModel):
    """Parameters of the lower-bound CMDP family with per-block sign patterns."""

    model_config = ConfigDict(frozen=True)

    S: int = Field(..., ge=4, description="State budget")
    A: int = Field(..., ge=3, description="Action count")
    I: int = Field(..., ge=8, description="Constraint budget")
    C: float = Field(..., ge=2.0, description="Concentrability target")
    gamma: float = Field(..., ge=0.5, lt=1.0, description="Discount factor")
    theta_c: List[int] = Field(..., description="Signs in {-1,+1}, length S_c*K, block-major")
    theta_u: List[int] = Field(default_factory=list, description="Signs in {-1,+1}, length S_u")
    varpi_c: float = Field(default=0.5, gt=0.0, le=0.5)
    varpi_u: float = Field(default=0.5, gt=0.0, le=0.5)

    @field_validator("theta_c", "theta_u")
    @classmethod
    def _signs(cls, v: List[int]) -> List[int]:
        return _check_signs(v, {-1, 1}, "theta")

    @model_validator(mode="after")
    def _check_lengths(self) -> "HardInstanceParams":
        if len(self.theta_c) != self.S_c * self.K:
            raise ValueError(f"theta_c must have S_c*K = {self.S_c * self.K} entries")
        if len(self.theta_u) != self.S_u:
            raise ValueError(f"theta_u must have S_u = {self.S_u} entries")
        return self

    @property
    def K(self) -> int:
        return min(self.I // 2, (self.A - 1) // 2)

    @property
    def S_c(self) -> int:
        return min(self.I // (2 * self.K), self.S)

    @property
    def S_u(self) -> int:
        return self.S - self.S_c if self.S_c < self.S - 3 else 0

    @staticmethod
    def block_counts(S: int, A: int, I: int) -> Dict[str, int]:
        """K, S_c and S_u for raw dimensions (used before theta is drawn)."""
        K = min(I // 2, (A - 1) // 2)
        S_c = min(I // (2 * K), S) if K > 0 else 0
        S_u = S - S_c if S_c < S - 3 else 0
        return {"K": K, "S_c": S_c, "S_u": S_u}

    def theta_matrix(self) -> List[List[int]]:
        """theta_c reshaped to [block j][pair i]."""
        return [self.theta_c[j * self.K:(j + 1) * self.K] for j in range(self.S_c)]


class SlaterInstanceParams(BaseModel):
    """Parameters of the single-constraint instance with a unique safe policy."""

    model_config = ConfigDict(frozen=True)

    S: int = Field(..., ge=4)
    A: int = Field(..., ge=3)
    C: float = Field(..., ge=2.0)
    gamma: float = Field(..., ge=0.5, lt=1.0)
    theta: List[int] = Field(..., description="Bits in {0,1}, length S")
    varpi: float = Field(default=0.5, gt=0.0, le=0.5)

    @field_validator("theta")
    @classmethod
    def _bits(cls, v: List[int]) -> List[int]:
        return _check_signs(v, {0, 1}, "theta")

    @model_validator(mode="after")
    def _check_length(self) -> "SlaterInstanceParams":
        if len(self.theta) != self.S:
            raise ValueError(f"theta must have S = {self.S} entries")
        return self


class RandomInstanceParams(BaseModel):
    """Parameters of the random well-conditioned CMDP generator."""

    model_config = ConfigDict(frozen=True)

    S: int = Field(..., ge=1)
    A: int = Field(..., ge=1)
    I: int = Field(default=0, ge=0)
    gamma: float = Field(..., gt=0.0, lt=1.0)
    slater_target: float = Field(default=0.1, gt=0.0, lt=1.0)
    seed: int = Field(default=0, ge=0)


class VerifyThresholds(BaseModel):
    """Pass thresholds of the verification test and the adaptive exit constant."""

    model_config = ConfigDict(frozen=True)

    flow_factor: float = Field(default=1.5, gt=0.0, description="Pass iff ||Delta_p||_1 <= flow_factor*phi*(1-gamma)*eps")
    utility_factor: float = Field(default=3.0, gt=0.0, description="Pass iff min_i J^u_i >= -utility_factor*phi*eps")
    exit_constant: float = Field(default=500.0, gt=0.0, description="Exit iff J^K - J^{K-1} <= exit_constant*eps")


class InstanceSpec(BaseModel):
    """Where the CMDP comes from: a model file or a generator call."""

    model_path: Optional[str] = None
    sidecar_path: Optional[str] = None
    generator: Optional[Literal["random", "hard", "slater"]] = None
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _one_source(self) -> "InstanceSpec":
        if (self.model_path is None) == (self.generator is None):
            raise ValueError("exactly one of model_path and generator must be given")
        return self


class DatasetSpec(BaseModel):
    """How the offline dataset is obtained."""

    path: Optional[str] = Field(default=None, description="Existing dataset file; sampling is skipped")
    mode: DatasetMode = DatasetMode.SYNCHRONOUS
    n: Optional[int] = Field(default=None, ge=1, description="Tuples to sample; defaults to what the solver consumes")
    seed: int = Field(default=0, ge=0)
    reference: Literal["sidecar", "uniform", "optimal-mixture"] = Field(
        default="optimal-mixture", description="mu (sync) or behavior policy (async) construction"
    )
    mixture_weight: float = Field(default=0.5, ge=0.0, le=1.0, description="Weight on the optimal occupancy")
    burn_in: int = Field(default=0, ge=0)


class SolverSpec(BaseModel):
    """DPDL / adaptive driver settings; unset fields fall back to the schedule."""

    mode: Literal["dpdl", "adaptive"] = "dpdl"
    epsilon: float = Field(default=0.05, gt=0.0)
    delta: float = Field(default=0.1, gt=0.0, lt=1.0)
    psi: Optional[float] = Field(default=None, ge=1.0, description="Defaults to C* when ground truth is available")
    phi: Optional[float] = Field(default=None, gt=0.0, description="Defaults to the oracle Slater margin")
    psi_init: float = Field(default=1.0, ge=1.0)
    T: Optional[int] = Field(default=None, ge=0)
    N_e: Optional[int] = Field(default=None, ge=1)
    N_v: Optional[int] = Field(default=None, ge=1)
    varsigma: Optional[float] = Field(default=None, gt=0.0)
    eta: Optional[float] = Field(default=None, gt=0.0)
    scale_budget: bool = Field(default=True, description="Scale T with psi_K/psi_1 across adaptive rounds")
    thresholds: VerifyThresholds = Field(default_factory=VerifyThresholds)


class DiagnosticsSpec(BaseModel):
    """Simulator-side diagnostics toggles."""

    ground_truth: bool = True
    duality_gap: bool = True
    checkpoints: Optional[int] = Field(default=None, ge=1, description="Checkpoint rows; defaults to settings")


class ExperimentConfig(BaseModel):
    """One experiment: instance, dataset, solver and diagnostics."""

    instance: InstanceSpec
    dataset: DatasetSpec = Field(default_factory=DatasetSpec)
    solver: SolverSpec = Field(default_factory=SolverSpec)
    diagnostics: DiagnosticsSpec = Field(default_factory=DiagnosticsSpec)
    output_dir: Optional[str] = None
    seed: int = Field(default=0, ge=0, description="Solver seed")

    @field_validator("solver")
    @classmethod
    def _epsilon_finite(cls, v: SolverSpec) -> SolverSpec:
        if not math.isfinite(v.epsilon):
            raise ValueError("epsilon must be finite")
        return v

    model_config = {
        "json_schema_extra": {
            "example": {
                "instance": {"generator": "random", "params": {"S": 6, "A": 3, "I": 2, "gamma": 0.9, "seed": 7}},
                "dataset": {"mode": "sync", "seed": 1, "reference": "optimal-mixture"},
                "solver": {"mode": "dpdl", "epsilon": 0.05, "T": 200000},
                "diagnostics": {"checkpoints": 10},
                "output_dir": "runs/example",
                "seed": 3,
            }
        }
    }
