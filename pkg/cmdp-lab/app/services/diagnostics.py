"""
Simulator-Side Diagnostics
==========================

Quantities that need the true reference distribution mu and therefore never
reach the learner: the closed-form inner minimum J_kappa(x) of the reweighted
Lagrangian, the duality gap Gap(x) = j(psi) - J_kappa(x), reward gap and
constraint violation of a reported policy, and the checkpoint monitor the
experiment layer hands to the solver.
"""

from typing import Callable, Dict, Optional

import numpy as np

from ..core.exceptions import InvalidArgumentError
from ..models.cmdp import CmdpModel, Policy
from ..models.requests import DpdlConfig, FeasibleRegions
from ..models.responses import Diagnostics, SolveReport
from .base import BaseService
from .cmdp_algebra import effective_sparsity, evaluate, flow_residual, policy_of_occupancy, shifted_utilities
from .lp_oracle import LpOracleService

MODULE = "experiment-cli"
DISAGREEMENT_TOL = 1e-6

Monitor = Callable[[int, np.ndarray, np.ndarray, np.ndarray], Dict[str, float]]


def importance_weights(mu: np.ndarray, mu_hat: np.ndarray) -> np.ndarray:
    """Diagonal of W = diag(mu / mu_hat)."""
    mu = np.asarray(mu, dtype=float)
    mu_hat = np.asarray(mu_hat, dtype=float).reshape(mu.shape)
    if np.any(mu_hat <= 0.0):
        raise InvalidArgumentError(MODULE, "mu_hat must be strictly positive")
    return mu / mu_hat


def j_kappa(
    model: CmdpModel,
    mu: np.ndarray,
    mu_hat: np.ndarray,
    x: np.ndarray,
    psi: float,
    phi: float,
    kappa: float,
) -> float:
    """
    min over the V and lambda balls of the reweighted Lagrangian at x:

        r'Wx - R_V ||A'Wx - rho0||_1 - R_Lambda ||[U_kappa W x]_-||_inf
    """
    S, A, I = model.num_states, model.num_actions, model.num_constraints
    regions = FeasibleRegions.build(psi, phi, model.discount, effective_sparsity(model))
    Wx = importance_weights(np.asarray(mu).reshape(S, A), mu_hat) * np.asarray(x, dtype=float).reshape(S, A)
    value = float(np.sum(model.reward * Wx)) - regions.R_V * float(np.abs(flow_residual(model, Wx)).sum())
    if I:
        constraint_values = np.einsum("isa,sa->i", shifted_utilities(model, kappa), Wx)
        value -= regions.R_Lambda * float(np.max(np.maximum(-constraint_values, 0.0)))
    return value


class DiagnosticsService(BaseService):
    """Recomputes report numbers against the oracle."""

    module = MODULE

    def __init__(self, oracle: Optional[LpOracleService] = None, **kwargs):
        super().__init__(**kwargs)
        self.oracle = oracle or LpOracleService(settings=self.settings, numeric=self.numeric)

    def duality_gap(
        self,
        model: CmdpModel,
        mu: np.ndarray,
        mu_hat: np.ndarray,
        x: np.ndarray,
        psi: float,
        phi: float,
        kappa: float,
        restricted: Optional[float] = None,
    ) -> float:
        """Gap(x) = j(psi) - J_kappa(x); pass ``restricted`` to reuse a computed j(psi)."""
        if restricted is None:
            weights = importance_weights(np.asarray(mu).reshape(model.num_states, model.num_actions), mu_hat)
            restricted, _ = self.oracle.restricted_value(model, mu_hat, weights, psi, kappa, phi)
        return restricted - j_kappa(model, mu, mu_hat, x, psi, phi, kappa)

    def policy_quality(self, model: CmdpModel, policy: np.ndarray, opt_reward: float) -> Dict[str, float]:
        """Reward gap and summed violation of a policy given as an (S, A) array."""
        reward, utilities = evaluate(model, Policy(probs=policy))
        return {
            "reward": reward,
            "reward_gap": opt_reward - reward,
            "violation": float(np.sum(np.maximum(-utilities, 0.0))),
        }

    def checkpoint_monitor(
        self,
        model: CmdpModel,
        mu: np.ndarray,
        mu_hat: np.ndarray,
        config: DpdlConfig,
        opt_reward: Optional[float] = None,
        duality_gap: bool = True,
    ) -> Monitor:
        """
        Build the per-checkpoint callback for a DPDL run.

        j(psi) depends only on mu_hat and the run constants, so it is solved
        once here and every checkpoint costs one occupancy solve.
        """
        restricted = None
        if duality_gap:
            weights = importance_weights(np.asarray(mu).reshape(model.num_states, model.num_actions), mu_hat)
            restricted, _ = self.oracle.restricted_value(model, mu_hat, weights, config.psi, config.kappa, config.phi)

        def monitor(t: int, x_bar: np.ndarray, V_bar: np.ndarray, lambda_bar: np.ndarray) -> Dict[str, float]:
            row: Dict[str, float] = {}
            if restricted is not None:
                row["gap_estimate"] = restricted - j_kappa(model, mu, mu_hat, x_bar, config.psi, config.phi, config.kappa)
            if opt_reward is not None:
                quality = self.policy_quality(model, policy_of_occupancy(x_bar).probs, opt_reward)
                row["reward_gap"] = quality["reward_gap"]
                row["violation"] = quality["violation"]
            return row

        return monitor

    def diagnose(
        self,
        model: CmdpModel,
        mu: Optional[np.ndarray],
        report: SolveReport,
        opt_reward: Optional[float] = None,
        duality_gap: bool = True,
    ) -> Diagnostics:
        """
        Recompute reward gap, violation and Gap(x_bar) from the stored report and
        flag every stored number that differs from its recomputation by more
        than 1e-6.

        Raises:
            InvalidArgumentError: mu is missing (diagnostics need simulator ground truth)
        """
        if mu is None:
            raise InvalidArgumentError(self.module, "diagnostics need the simulator ground truth mu (pass a sidecar)")
        if opt_reward is None:
            opt_reward, _ = self.oracle.solve_cmdp(model)
        reward, utilities = evaluate(model, Policy(probs=report.policy))
        reward_gap = opt_reward - reward
        violation = float(np.sum(np.maximum(-utilities, 0.0)))

        restricted = j_value = gap = None
        if duality_gap:
            config = report.config
            weights = importance_weights(np.asarray(mu).reshape(model.num_states, model.num_actions), report.mu_hat)
            restricted, _ = self.oracle.restricted_value(model, report.mu_hat, weights, config.psi, config.kappa, config.phi)
            j_value = j_kappa(model, mu, report.mu_hat, report.x_bar, config.psi, config.phi, config.kappa)
            gap = restricted - j_value

        disagreements: Dict[str, float] = {}
        for name, stored, recomputed in (
            ("reward_gap", report.reward_gap, reward_gap),
            ("violation", report.violation, violation),
            ("gap_estimate", report.gap_estimate, gap),
        ):
            if stored is not None and recomputed is not None and abs(stored - recomputed) > DISAGREEMENT_TOL:
                disagreements[name] = abs(stored - recomputed)
        if disagreements:
            self.logger.warning("Report disagrees with recomputation", **disagreements)

        return Diagnostics(
            opt_reward=opt_reward,
            reward=reward,
            utilities=utilities,
            reward_gap=reward_gap,
            violation=violation,
            restricted_value=restricted,
            j_kappa=j_value,
            gap_estimate=gap,
            disagreements=disagreements,
        )
