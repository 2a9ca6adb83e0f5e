"""
Output Models
=============

Pydantic models for everything cmdp-lab reports: oracle ground truth, the
reference estimate, DPDL solve reports, verification and adaptive traces,
and simulator-side diagnostics. Arrays serialize to nested JSON lists.
"""

from typing import Annotated, Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, PlainSerializer, model_validator

from .requests import DpdlConfig


def _as_float_array(value) -> np.ndarray:
    return np.asarray(value, dtype=float)


def _as_int_array(value) -> np.ndarray:
    return np.asarray(value, dtype=np.int64)


FloatArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_float_array),
    PlainSerializer(lambda a: np.asarray(a).tolist(), return_type=list),
]
IntArray = Annotated[
    np.ndarray,
    BeforeValidator(_as_int_array),
    PlainSerializer(lambda a: np.asarray(a).tolist(), return_type=list),
]


class ReportModel(BaseModel):
    """Base for report records with numpy array fields."""

    model_config = ConfigDict(arbitrary_types_allowed=True)


class GroundTruth(ReportModel):
    """Exact oracle quantities for one model and reference distribution."""

    opt_reward: float = Field(..., description="J(pi*)")
    opt_occupancy: FloatArray = Field(..., description="nu*, shape (S, A)")
    concentrability: float = Field(..., description="C*, +inf when no optimal policy is covered")
    slater_margin: float = Field(..., description="phi")
    effective_sparsity: int = Field(..., ge=1, description="N = min(|S||A|, |S|+I)")

    @model_validator(mode="after")
    def _check_ranges(self) -> "GroundTruth":
        if self.concentrability < 1.0 - 1e-9:
            raise ValueError("concentrability must be at least 1")
        return self


class ReferenceEstimate(ReportModel):
    """Floored empirical estimate of the reference distribution."""

    mu_hat: FloatArray = Field(..., description="max(N(s,a)/N_e, varsigma), shape (S, A)")
    counts: IntArray = Field(..., description="N(s,a) over the first N_e tuples")
    varsigma: float = Field(..., gt=0.0)
    N_e: int = Field(..., ge=1)

    @model_validator(mode="after")
    def _check_floor(self) -> "ReferenceEstimate":
        if self.mu_hat.shape != self.counts.shape:
            raise ValueError("mu_hat and counts must have the same shape")
        if not np.allclose(self.mu_hat, np.maximum(self.counts / self.N_e, self.varsigma), rtol=1e-12, atol=0.0):
            raise ValueError("mu_hat must equal max(counts/N_e, varsigma)")
        return self


class Checkpoint(BaseModel):
    """One row of the convergence curve."""

    t: int
    gap_estimate: Optional[float] = None
    reward_gap: Optional[float] = None
    violation: Optional[float] = None
    eta: float
    wall_ms: float


class SolveReport(ReportModel):
    """Result of one DPDL run."""

    policy: FloatArray = Field(..., description="pi_bar(a|s), shape (S, A)")
    x_bar: FloatArray = Field(..., description="Averaged x iterate, shape (S, A)")
    V_bar: FloatArray = Field(..., description="Averaged V iterate, shape (S,)")
    lambda_bar: FloatArray = Field(..., description="Averaged lambda iterate, shape (I,)")
    mu_hat: FloatArray = Field(..., description="Reference estimate used by the run")
    iterations: int = Field(..., ge=0)
    reward_gap: Optional[float] = Field(default=None, description="J(pi*) - J(pi_bar)")
    violation: Optional[float] = Field(default=None, description="sum_i [J_i^u(pi_bar)]_-")
    gap_estimate: Optional[float] = Field(default=None, description="Duality gap of x_bar")
    checkpoints: List[Checkpoint] = Field(default_factory=list)
    wall_ms: float = 0.0
    config: DpdlConfig
    seed: int = 0
    experiment: Optional[Dict[str, Any]] = Field(default=None, description="Effective experiment configuration")


class VerifyReport(ReportModel):
    """Statistics and decision of one verification test."""

    passed: bool
    J_hat: float = Field(..., description="Estimated reward value of pi_bar")
    J_u_hat: FloatArray = Field(..., description="Estimated shifted utility values, shape (I,)")
    Delta_p_hat: FloatArray = Field(..., description="Estimated flow residual, shape (S,)")
    N_v: int = Field(..., ge=0)
    flow_threshold: float = Field(..., description="Pass bound on ||Delta_p_hat||_1")
    utility_threshold: float = Field(..., description="Pass bound on -min_i J_u_hat_i")

    def decide(self) -> bool:
        """Re-evaluate the pass decision from the stored statistics."""
        flow_ok = float(np.abs(self.Delta_p_hat).sum()) <= self.flow_threshold
        utility_ok = self.J_u_hat.size == 0 or float(self.J_u_hat.min()) >= -self.utility_threshold
        return bool(flow_ok and utility_ok)


class AdaptiveRound(ReportModel):
    """One psi level of the doubling driver."""

    round: int = Field(..., ge=1)
    psi: float = Field(..., ge=1.0)
    delta: float
    epsilon: float
    T: int
    verify: VerifyReport
    J: Optional[float] = Field(default=None, description="Verified value estimate; absent when not verified")
    exit_reason: Optional[str] = None


class AdaptiveTrace(ReportModel):
    """Full history of an adaptive run."""

    rounds: List[AdaptiveRound] = Field(default_factory=list)
    final_policy: Optional[FloatArray] = None
    exit_reason: Optional[str] = None

    @property
    def psi_values(self) -> List[float]:
        return [r.psi for r in self.rounds]


class Diagnostics(ReportModel):
    """Simulator-side recomputation of a solve report."""

    opt_reward: float
    reward: float = Field(..., description="J(pi_bar)")
    utilities: FloatArray = Field(..., description="J_i^u(pi_bar)")
    reward_gap: float
    violation: float
    restricted_value: Optional[float] = Field(default=None, description="j(psi)")
    j_kappa: Optional[float] = Field(default=None, description="J_kappa(x_bar)")
    gap_estimate: Optional[float] = None
    disagreements: Dict[str, float] = Field(default_factory=dict, description="|stored - recomputed| above tolerance")

    @property
    def flagged(self) -> bool:
        return bool(self.disagreements)


class InstanceSidecar(ReportModel):
    """Simulator-side companion of a model file: the true mu and the known optimum."""

    family: str = Field(..., description="Generator family: random, hard or slater")
    params: Dict[str, Any] = Field(default_factory=dict)
    mu: FloatArray = Field(..., description="Reference distribution, shape (S, A)")
    optimal_policy: Optional[FloatArray] = Field(default=None, description="Known optimal policy, shape (S, A)")
    optimal_value: Optional[float] = Field(default=None, description="Known optimal value J*")
