"""
Dense Revised Simplex
=====================

Small-scale LP backend for every oracle query. General LPs are brought to
standard form (min c z, A z = b, z >= 0, b >= 0) the way scipy's legacy
``_get_Abc`` does it: free variables are split, finite upper bounds become
rows, inequality rows receive slack/surplus columns. Phase 1 minimizes a sum
of artificials; phase 2 optimizes the real objective. Entering and leaving
variables follow Bland's rule, so the method terminates without cycling.

Every Optimal result is certified by an independent check of primal
feasibility, dual feasibility of the reduced costs and the primal-dual
objective gap.
"""

from dataclasses import dataclass
from enum import Enum
from typing import Any, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg, optimize

from ..core.config import get_numeric_config, get_settings
from ..core.exceptions import InvalidArgumentError, SolverError
from ..core.logging import get_logger

MODULE = "lp-oracle"
logger = get_logger(__name__)


class ConstraintSense(str, Enum):
    """Row sense of a linear constraint."""

    LE = "<="
    EQ = "=="
    GE = ">="


class LpStatus(str, Enum):
    """Terminal status of an LP solve."""

    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"


class LinearProgram(BaseModel):
    """Canonical LP container: optimize c x s.t. rows(x) sense rhs, lower <= x <= upper."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    objective: np.ndarray = Field(..., description="Objective coefficients, shape (n,)")
    matrix: np.ndarray = Field(..., description="Constraint matrix, shape (m, n)")
    senses: List[ConstraintSense] = Field(..., description="Row senses, length m")
    rhs: np.ndarray = Field(..., description="Right-hand sides, shape (m,)")
    lower: np.ndarray = Field(..., description="Lower bounds: 0 or -inf")
    upper: np.ndarray = Field(..., description="Upper bounds: finite or +inf")
    maximize: bool = False

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        objective = np.asarray(data["objective"], dtype=float).reshape(-1)
        n = objective.size
        data["objective"] = objective
        data["matrix"] = np.asarray(data.get("matrix", np.zeros((0, n))), dtype=float).reshape(-1, n)
        data["rhs"] = np.asarray(data.get("rhs", np.zeros(0)), dtype=float).reshape(-1)
        data["lower"] = np.asarray(data.get("lower", np.zeros(n)), dtype=float).reshape(-1)
        data["upper"] = np.asarray(data.get("upper", np.full(n, np.inf)), dtype=float).reshape(-1)
        data["senses"] = [ConstraintSense(sense) for sense in data.get("senses", [])]
        return data

    @model_validator(mode="after")
    def _check_consistency(self) -> "LinearProgram":
        n = self.objective.size
        m = self.matrix.shape[0]
        if len(self.senses) != m or self.rhs.size != m:
            raise ValueError(f"expected {m} senses and right-hand sides")
        if self.lower.size != n or self.upper.size != n:
            raise ValueError(f"expected {n} lower and upper bounds")
        for name, array in (("objective", self.objective), ("matrix", self.matrix), ("rhs", self.rhs)):
            if not np.all(np.isfinite(array)):
                raise ValueError(f"{name} has non-finite entries")
        if not np.all((self.lower == 0.0) | np.isneginf(self.lower)):
            raise ValueError("lower bounds must be 0 or -inf")
        if np.any(np.isnan(self.upper)) or np.any(np.isneginf(self.upper)):
            raise ValueError("upper bounds must be finite or +inf")
        if np.any(self.upper < self.lower):
            raise ValueError("upper bound below lower bound")
        return self

    @property
    def num_variables(self) -> int:
        return self.objective.size


@dataclass(frozen=True)
class LpResult:
    """Outcome of an LP solve; ``primal`` and ``value`` are set only when Optimal."""

    status: LpStatus
    value: float
    primal: Optional[np.ndarray]
    iterations: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


@dataclass
class _StandardForm:
    A: np.ndarray
    b: np.ndarray
    c: np.ndarray
    positive_cols: np.ndarray
    negative_cols: np.ndarray


def _standard_form(lp: LinearProgram) -> _StandardForm:
    n = lp.num_variables
    free = np.isneginf(lp.lower)
    positive_cols = np.arange(n)
    negative_cols = np.full(n, -1)
    negative_cols[free] = n + np.arange(int(free.sum()))
    num_struct = n + int(free.sum())

    rows: List[np.ndarray] = []
    rhs: List[float] = []
    senses: List[ConstraintSense] = []

    def expand(coeffs: np.ndarray) -> np.ndarray:
        row = np.zeros(num_struct)
        row[:n] = coeffs
        row[negative_cols[free]] = -coeffs[free]
        return row

    for i in range(lp.matrix.shape[0]):
        rows.append(expand(lp.matrix[i]))
        rhs.append(lp.rhs[i])
        senses.append(lp.senses[i])
    for j in np.flatnonzero(np.isfinite(lp.upper)):
        unit = np.zeros(n)
        unit[j] = 1.0
        rows.append(expand(unit))
        rhs.append(lp.upper[j])
        senses.append(ConstraintSense.LE)

    m = len(rows)
    num_slack = sum(sense is not ConstraintSense.EQ for sense in senses)
    A = np.zeros((m, num_struct + num_slack))
    b = np.array(rhs, dtype=float)
    slack = num_struct
    for i, (row, sense) in enumerate(zip(rows, senses)):
        A[i, :num_struct] = row
        if sense is ConstraintSense.LE:
            A[i, slack] = 1.0
            slack += 1
        elif sense is ConstraintSense.GE:
            A[i, slack] = -1.0
            slack += 1
    flip = b < 0.0
    A[flip] *= -1.0
    b[flip] *= -1.0

    c = np.zeros(A.shape[1])
    sign = -1.0 if lp.maximize else 1.0
    c[:n] = sign * lp.objective
    c[negative_cols[free]] = -sign * lp.objective[free]
    return _StandardForm(A=A, b=b, c=c, positive_cols=positive_cols, negative_cols=negative_cols)


class RevisedSimplex:
    """Two-phase dense revised simplex with Bland's anti-cycling rule."""

    def __init__(self, feas_tol: Optional[float] = None, opt_tol: Optional[float] = None, max_iter: Optional[int] = None):
        numeric = get_numeric_config()
        self.feas_tol = numeric.SIMPLEX_FEAS_TOL if feas_tol is None else feas_tol
        self.opt_tol = numeric.LP_OPT_TOL if opt_tol is None else opt_tol
        self.max_iter = numeric.SIMPLEX_MAX_ITER if max_iter is None else max_iter
        self.iterations = 0

    def solve(self, lp: LinearProgram) -> LpResult:
        self.iterations = 0
        form = _standard_form(lp)
        A, b, c = form.A, form.b, form.c
        m, N = A.shape

        if m == 0:
            if np.any(c < -self.opt_tol):
                return LpResult(LpStatus.UNBOUNDED, float("nan"), None)
            z = np.zeros(N)
            return self._finish(lp, form, z)

        # Phase 1: artificial basis.
        A1 = np.hstack([A, np.eye(m)])
        c1 = np.concatenate([np.zeros(N), np.ones(m)])
        basis = list(range(N, N + m))
        status, basis = self._iterate(A1, b, c1, basis)
        if status is LpStatus.UNBOUNDED:
            raise SolverError(MODULE, "phase 1 reported unbounded; this cannot happen for a bounded auxiliary problem")
        x_basic = self._basic_solution(A1, b, basis)
        infeasibility = float(c1[basis] @ x_basic)
        if infeasibility > self.feas_tol * max(1.0, float(np.max(np.abs(b)))):
            return LpResult(LpStatus.INFEASIBLE, float("nan"), None, self.iterations)

        A, b, basis = self._drive_out_artificials(A, b, basis, N)

        # Phase 2.
        status, basis = self._iterate(A, b, c, basis)
        if status is LpStatus.UNBOUNDED:
            return LpResult(LpStatus.UNBOUNDED, float("nan"), None, self.iterations)

        z = np.zeros(N)
        if basis:
            z[basis] = self._basic_solution(A, b, basis)
        self._certify(A, b, c, basis, z)
        return self._finish(lp, form, np.maximum(z, 0.0))

    def _finish(self, lp: LinearProgram, form: _StandardForm, z: np.ndarray) -> LpResult:
        n = lp.num_variables
        x = z[form.positive_cols].copy()
        free = form.negative_cols >= 0
        x[free] -= z[form.negative_cols[free]]
        value = float(lp.objective @ x) if n else 0.0
        return LpResult(LpStatus.OPTIMAL, value, x, self.iterations)

    @staticmethod
    def _basic_solution(A: np.ndarray, b: np.ndarray, basis: List[int]) -> np.ndarray:
        return linalg.solve(A[:, basis], b)

    def _iterate(self, A: np.ndarray, b: np.ndarray, c: np.ndarray, basis: List[int]) -> Tuple[LpStatus, List[int]]:
        basis = list(basis)
        cost_scale = max(1.0, float(np.max(np.abs(c)))) if c.size else 1.0
        while True:
            if self.iterations >= self.max_iter:
                raise SolverError(MODULE, f"cycling guard tripped after {self.iterations} pivots")
            factors = linalg.lu_factor(A[:, basis])
            x_basic = linalg.lu_solve(factors, b)
            duals = linalg.lu_solve(factors, c[basis], trans=1)
            reduced = c - A.T @ duals
            reduced[basis] = 0.0

            # Bland: smallest index with negative reduced cost enters.
            candidates = np.flatnonzero(reduced < -self.opt_tol * cost_scale)
            if candidates.size == 0:
                return LpStatus.OPTIMAL, basis
            entering = int(candidates[0])

            direction = linalg.lu_solve(factors, A[:, entering])
            positive = np.flatnonzero(direction > self.feas_tol)
            if positive.size == 0:
                return LpStatus.UNBOUNDED, basis
            ratios = np.maximum(x_basic[positive], 0.0) / direction[positive]
            best = ratios.min()
            tied = positive[ratios <= best + self.feas_tol * max(1.0, abs(best))]
            # Bland: among tied rows, the basic variable with smallest index leaves.
            leaving_pos = int(min(tied, key=lambda pos: basis[pos]))
            basis[leaving_pos] = entering
            self.iterations += 1

    def _drive_out_artificials(self, A: np.ndarray, b: np.ndarray, basis: List[int], N: int) -> Tuple[np.ndarray, np.ndarray, List[int]]:
        A1 = np.hstack([A, np.eye(A.shape[0])])
        basis = list(basis)
        while True:
            artificial = [pos for pos, var in enumerate(basis) if var >= N]
            if not artificial:
                break
            pos = artificial[0]
            factors = linalg.lu_factor(A1[:, basis])
            unit = np.zeros(len(basis))
            unit[pos] = 1.0
            row = linalg.lu_solve(factors, unit, trans=1) @ A1[:, :N]
            row[[var for var in basis if var < N]] = 0.0
            pivots = np.flatnonzero(np.abs(row) > self.feas_tol)
            if pivots.size:
                basis[pos] = int(pivots[0])
                continue
            # Zero tableau row: the row owning this artificial is redundant.
            drop = basis[pos] - N
            del basis[pos]
            A1 = np.delete(A1, drop, axis=0)
            A1 = np.delete(A1, N + drop, axis=1)
            b = np.delete(b, drop)
            basis = [var if var < N + drop else var - 1 for var in basis]
        return A1[:, :N], b, basis

    def _certify(self, A: np.ndarray, b: np.ndarray, c: np.ndarray, basis: List[int], z: np.ndarray) -> None:
        scale = max(1.0, float(np.max(np.abs(b))) if b.size else 1.0, float(np.max(np.abs(c))) if c.size else 1.0)
        tol = self.opt_tol * scale
        primal_residual = float(np.max(np.abs(A @ z - b))) if b.size else 0.0
        duals = linalg.solve(A[:, basis].T, c[basis]) if basis else np.zeros(0)
        reduced = c - A.T @ duals
        objective_gap = abs(float(c @ z) - float(b @ duals))
        worst = max(primal_residual, float(-z.min(initial=0.0)), float(-reduced.min(initial=0.0)), objective_gap / max(1.0, abs(float(c @ z))))
        if worst > tol:
            raise SolverError(MODULE, f"optimality certificate failed (worst KKT residual {worst:.3e})")


def _solve_highs(lp: LinearProgram) -> LpResult:
    sign = -1.0 if lp.maximize else 1.0
    le = [i for i, s in enumerate(lp.senses) if s is ConstraintSense.LE]
    ge = [i for i, s in enumerate(lp.senses) if s is ConstraintSense.GE]
    eq = [i for i, s in enumerate(lp.senses) if s is ConstraintSense.EQ]
    A_ub = np.vstack([lp.matrix[le], -lp.matrix[ge]]) if le or ge else None
    b_ub = np.concatenate([lp.rhs[le], -lp.rhs[ge]]) if le or ge else None
    A_eq = lp.matrix[eq] if eq else None
    b_eq = lp.rhs[eq] if eq else None
    bounds = [(None if np.isneginf(lo) else lo, None if np.isposinf(hi) else hi) for lo, hi in zip(lp.lower, lp.upper)]
    result = optimize.linprog(sign * lp.objective, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=b_eq, bounds=bounds, method="highs")
    if result.status == 0:
        return LpResult(LpStatus.OPTIMAL, float(lp.objective @ result.x), np.asarray(result.x), int(result.nit))
    if result.status == 2:
        return LpResult(LpStatus.INFEASIBLE, float("nan"), None, int(result.nit))
    if result.status == 3:
        return LpResult(LpStatus.UNBOUNDED, float("nan"), None, int(result.nit))
    raise SolverError(MODULE, f"HiGHS failed: {result.message}")


def solve_lp(lp: LinearProgram, backend: Optional[str] = None) -> LpResult:
    """
    Solve an LP with the configured backend.

    Args:
        lp: Problem to solve
        backend: ``"simplex"`` (default) or ``"highs"``; falls back to settings

    Returns:
        LpResult with status Optimal, Infeasible or Unbounded
    """
    backend = backend or get_settings().lp_backend
    if backend == "simplex":
        return RevisedSimplex().solve(lp)
    if backend == "highs":
        return _solve_highs(lp)
    raise InvalidArgumentError(MODULE, f"unknown LP backend {backend!r}")
