"""
LP Oracle Service
=================

Exact ground truth for a CMDP: the optimal occupancy LP, the concentrability
coefficient over the optimal face, the Slater margin and the restricted
saddle value used by the duality-gap diagnostic. Every query is an LP built
here and solved by ``solve_lp``.

Occupancy variables are flattened row-major over (s, a).
"""

from typing import List, Optional, Tuple

import numpy as np

from ..core.exceptions import InfeasibleProblemError, InvalidArgumentError, SolverError
from ..models.cmdp import CmdpModel, OccupancyMeasure
from ..models.requests import FeasibleRegions
from ..models.responses import GroundTruth
from .base import BaseService
from .cmdp_algebra import effective_sparsity, flow_matrix, shifted_utilities
from .simplex import ConstraintSense, LinearProgram, LpResult, LpStatus, solve_lp

EQ, LE, GE = ConstraintSense.EQ, ConstraintSense.LE, ConstraintSense.GE


class _RowBuilder:
    """Accumulates constraint rows for one LP."""

    def __init__(self, num_variables: int):
        self.num_variables = num_variables
        self.rows: List[np.ndarray] = []
        self.senses: List[ConstraintSense] = []
        self.rhs: List[float] = []

    def add(self, coeffs: np.ndarray, sense: ConstraintSense, rhs: float) -> None:
        row = np.zeros(self.num_variables)
        row[: coeffs.size] = coeffs
        self.rows.append(row)
        self.senses.append(sense)
        self.rhs.append(float(rhs))

    def add_block(self, block: np.ndarray, sense: ConstraintSense, rhs: np.ndarray) -> None:
        for coeffs, value in zip(np.atleast_2d(block), np.atleast_1d(rhs)):
            self.add(coeffs, sense, value)

    def build(self, objective: np.ndarray, maximize: bool, lower: Optional[np.ndarray] = None, upper: Optional[np.ndarray] = None) -> LinearProgram:
        n = self.num_variables
        return LinearProgram(
            objective=objective,
            matrix=np.array(self.rows) if self.rows else np.zeros((0, n)),
            senses=self.senses,
            rhs=np.array(self.rhs),
            lower=np.zeros(n) if lower is None else lower,
            upper=np.full(n, np.inf) if upper is None else upper,
            maximize=maximize,
        )


class LpOracleService(BaseService):
    """Ground-truth LP queries for tabular CMDPs."""

    module = "lp-oracle"

    def __init__(self, backend: Optional[str] = None, **kwargs):
        super().__init__(**kwargs)
        self.backend = backend or self.settings.lp_backend

    def _solve(self, lp: LinearProgram) -> LpResult:
        return solve_lp(lp, backend=self.backend)

    def _occupancy_rows(self, model: CmdpModel, num_variables: int) -> _RowBuilder:
        """Flow equalities and (unshifted) constraint rows over the first S*A variables."""
        builder = _RowBuilder(num_variables)
        builder.add_block(flow_matrix(model).entries.T, EQ, model.initial_dist)
        if model.num_constraints:
            builder.add_block(model.utilities.reshape(model.num_constraints, -1), GE, np.zeros(model.num_constraints))
        return builder

    def _check_mu(self, model: CmdpModel, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        self.require(mu.size == model.num_states * model.num_actions, f"mu must have {model.num_states * model.num_actions} entries")
        mu = mu.reshape(-1)
        self.require(bool(np.all(np.isfinite(mu))) and bool(np.all(mu >= 0.0)), "mu must be nonnegative")
        self.require(abs(mu.sum() - 1.0) <= self.numeric.MASS_TOL, f"mu must sum to 1 (sum {mu.sum():.12f})")
        return mu

    def _coverage_rows(self, builder: _RowBuilder, model: CmdpModel, mu: np.ndarray, scale_column: Optional[int], psi: float = 1.0) -> np.ndarray:
        """
        Deviation constraints (1-gamma) nu <= t mu and sum (1-gamma) nu/mu <= N t.

        With ``scale_column`` the bound t is that LP variable, otherwise the
        constant ``psi``. Returns upper bounds forcing nu = 0 where mu = 0.
        """
        n = model.num_states * model.num_actions
        covered = mu > 0.0
        horizon_inv = 1.0 - model.discount
        sparsity = effective_sparsity(model)
        for k in np.flatnonzero(covered):
            coeffs = np.zeros(builder.num_variables)
            coeffs[k] = horizon_inv
            if scale_column is None:
                builder.add(coeffs, LE, psi * mu[k])
            else:
                coeffs[scale_column] = -mu[k]
                builder.add(coeffs, LE, 0.0)
        aggregate = np.zeros(builder.num_variables)
        aggregate[:n][covered] = horizon_inv / mu[covered]
        if scale_column is None:
            builder.add(aggregate, LE, sparsity * psi)
        else:
            aggregate[scale_column] = -float(sparsity)
            builder.add(aggregate, LE, 0.0)
        upper = np.full(builder.num_variables, np.inf)
        upper[:n][~covered] = 0.0
        return upper

    def solve_cmdp(self, model: CmdpModel) -> Tuple[float, OccupancyMeasure]:
        """
        Solve max <nu, r> over safe occupancy measures.

        Raises:
            InfeasibleProblemError: the model admits no safe policy
        """
        n = model.num_states * model.num_actions
        lp = self._occupancy_rows(model, n).build(model.reward.reshape(-1), maximize=True)
        result = self._solve(lp)
        if result.status is LpStatus.INFEASIBLE:
            raise InfeasibleProblemError(self.module, "the CMDP admits no safe policy")
        if result.status is LpStatus.UNBOUNDED:
            raise SolverError(self.module, "occupancy LP reported unbounded over a bounded polytope")
        nu = np.maximum(result.primal, 0.0).reshape(model.num_states, model.num_actions)
        self.logger.debug("CMDP LP solved", value=result.value, pivots=result.iterations)
        return result.value, OccupancyMeasure(values=nu)

    def concentrability_with_witness(
        self, model: CmdpModel, mu: np.ndarray, opt_reward: Optional[float] = None
    ) -> Tuple[float, Optional[OccupancyMeasure]]:
        """C* and the optimal occupancy attaining it; (+inf, None) when no optimal policy is covered."""
        mu = self._check_mu(model, mu)
        if opt_reward is None:
            opt_reward, _ = self.solve_cmdp(model)
        n = model.num_states * model.num_actions
        t_col = n
        builder = self._occupancy_rows(model, n + 1)
        builder.add(model.reward.reshape(-1), GE, opt_reward - self.numeric.OPTIMAL_FACE_SLACK)
        upper = self._coverage_rows(builder, model, mu, scale_column=t_col)
        objective = np.zeros(n + 1)
        objective[t_col] = 1.0
        result = self._solve(builder.build(objective, maximize=False, upper=upper))
        if result.status is not LpStatus.OPTIMAL:
            return float("inf"), None
        nu = np.maximum(result.primal[:n], 0.0).reshape(model.num_states, model.num_actions)
        return float(result.value), OccupancyMeasure(values=nu)

    def concentrability(self, model: CmdpModel, mu: np.ndarray, opt_reward: Optional[float] = None) -> float:
        """Smallest psi such that some optimal policy lies in the deviation set D(psi)."""
        value, _ = self.concentrability_with_witness(model, mu, opt_reward)
        return value

    def _slater_lp(self, model: CmdpModel, mu: Optional[np.ndarray], psi: float) -> Tuple[float, Optional[OccupancyMeasure]]:
        n = model.num_states * model.num_actions
        I = model.num_constraints
        z_col = n
        builder = _RowBuilder(n + 1)
        builder.add_block(flow_matrix(model).entries.T, EQ, model.initial_dist)
        epigraph = np.zeros((I, n + 1))
        epigraph[:, :n] = model.utilities.reshape(I, -1)
        epigraph[:, z_col] = -1.0
        builder.add_block(epigraph, GE, np.zeros(I))
        upper = None
        if mu is not None:
            upper = self._coverage_rows(builder, model, mu, scale_column=None, psi=psi)
        lower = np.zeros(n + 1)
        lower[z_col] = -np.inf
        objective = np.zeros(n + 1)
        objective[z_col] = 1.0
        result = self._solve(builder.build(objective, maximize=True, lower=lower, upper=upper))
        if result.status is LpStatus.INFEASIBLE:
            return float("-inf"), None
        if result.status is LpStatus.UNBOUNDED:
            raise SolverError(self.module, "Slater LP reported unbounded")
        nu = np.maximum(result.primal[:n], 0.0).reshape(model.num_states, model.num_actions)
        return (1.0 - model.discount) * result.value, OccupancyMeasure(values=nu)

    def slater_margin_with_witness(self, model: CmdpModel) -> Tuple[float, Optional[OccupancyMeasure]]:
        """phi and an occupancy attaining it; phi = 1 with no witness when I = 0."""
        if model.num_constraints == 0:
            return 1.0, None
        return self._slater_lp(model, None, 1.0)

    def slater_margin(self, model: CmdpModel) -> float:
        """phi = (1-gamma) max_nu min_i <u_i, nu>; nonpositive when Slater fails."""
        value, _ = self.slater_margin_with_witness(model)
        return value

    def restricted_slater_margin(self, model: CmdpModel, mu: np.ndarray, psi: float) -> float:
        """Slater margin over occupancies in D(psi); -inf when D(psi) is empty."""
        if psi < 1.0:
            raise InvalidArgumentError(self.module, f"psi must be >= 1, got {psi}")
        mu = self._check_mu(model, mu)
        if model.num_constraints == 0:
            return 1.0
        value, _ = self._slater_lp(model, mu, psi)
        return value

    def restricted_value(
        self,
        model: CmdpModel,
        mu_hat: np.ndarray,
        weights: np.ndarray,
        psi: float,
        kappa: float,
        phi: float,
    ) -> Tuple[float, np.ndarray]:
        """
        j(psi) = max over x in X of J_kappa(x).

        J_kappa(x) = r'Wx - R_V ||A'Wx - rho0||_1 - R_Lambda ||[U_kappa W x]_-||_inf
        is maximized through an epigraph LP: one slack e(s) per flow row and a
        single z bounding every negative constraint part.

        Args:
            model: CMDP
            mu_hat: Reference estimate, shape (S, A), entries > 0
            weights: Diagonal of W, shape (S, A)
            psi: Deviation-control level
            kappa: Constraint conservatism
            phi: Slater margin used for R_V and R_Lambda

        Returns:
            (j(psi), maximizing x of shape (S, A))
        """
        S, A, I = model.num_states, model.num_actions, model.num_constraints
        n = S * A
        mu_hat = np.asarray(mu_hat, dtype=float).reshape(-1)
        weights = np.asarray(weights, dtype=float).reshape(-1)
        self.require(mu_hat.size == n and bool(np.all(mu_hat > 0.0)), "mu_hat must be positive with S*A entries")
        self.require(weights.size == n and bool(np.all(weights >= 0.0)), "weights must be nonnegative with S*A entries")
        self.require(psi >= 1.0 and kappa >= 0.0 and phi > 0.0, "need psi >= 1, kappa >= 0, phi > 0")

        regions = FeasibleRegions.build(psi, phi, model.discount, effective_sparsity(model))
        e_cols = np.arange(n, n + S)
        z_col = n + S
        num_vars = n + S + 1
        builder = _RowBuilder(num_vars)

        flow_w = flow_matrix(model).entries.T * weights[None, :]
        block = np.zeros((S, num_vars))
        block[:, :n] = flow_w
        block[np.arange(S), e_cols] = -1.0
        builder.add_block(block, LE, model.initial_dist)
        block = np.zeros((S, num_vars))
        block[:, :n] = -flow_w
        block[np.arange(S), e_cols] = -1.0
        builder.add_block(block, LE, -model.initial_dist)
        if I:
            u_w = shifted_utilities(model, kappa).reshape(I, n) * weights[None, :]
            block = np.zeros((I, num_vars))
            block[:, :n] = -u_w
            block[:, z_col] = -1.0
            builder.add_block(block, LE, np.zeros(I))

        aggregate = np.zeros(num_vars)
        aggregate[:n] = 1.0 / mu_hat
        builder.add(aggregate, LE, regions.x_cap_aggregate)
        mass = np.zeros(num_vars)
        mass[:n] = 1.0
        builder.add(mass, LE, regions.x_cap_mass)

        upper = np.full(num_vars, np.inf)
        upper[:n] = regions.x_cap_per_coord * mu_hat
        if not I:
            upper[z_col] = 0.0
        objective = np.zeros(num_vars)
        objective[:n] = model.reward.reshape(-1) * weights
        objective[e_cols] = -regions.R_V
        objective[z_col] = -regions.R_Lambda

        result = self._solve(builder.build(objective, maximize=True, upper=upper))
        if result.status is not LpStatus.OPTIMAL:
            raise SolverError(self.module, f"restricted value LP ended {result.status.value}; x = 0 is always feasible")
        x = np.maximum(result.primal[:n], 0.0).reshape(S, A)
        return float(result.value), x

    def ground_truth(self, model: CmdpModel, mu: np.ndarray) -> GroundTruth:
        """Assemble every oracle quantity for (model, mu)."""
        opt_reward, nu_star = self.solve_cmdp(model)
        c_star = self.concentrability(model, mu, opt_reward=opt_reward)
        phi = self.slater_margin(model)
        self.logger.info("Ground truth computed", opt_reward=opt_reward, concentrability=c_star, slater_margin=phi)
        return GroundTruth(
            opt_reward=opt_reward,
            opt_occupancy=nu_star.values,
            concentrability=c_star,
            slater_margin=phi,
            effective_sparsity=effective_sparsity(model),
        )
