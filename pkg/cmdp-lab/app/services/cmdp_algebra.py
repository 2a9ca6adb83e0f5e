"""
Occupancy Algebra
=================

Exact (non-statistical) policy and occupancy computations for tabular CMDPs.
All functions are pure: they read immutable models and return new objects.
"""

from typing import Tuple, Union

import numpy as np
from scipy import linalg

from ..core.config import get_numeric_config
from ..core.exceptions import InvalidArgumentError, SolverError
from ..models.cmdp import CmdpModel, FlowMatrix, OccupancyMeasure, Policy

MODULE = "cmdp-core"

ArrayLike = Union[np.ndarray, OccupancyMeasure]


def _check_policy(model: CmdpModel, pi: Policy) -> None:
    expected = (model.num_states, model.num_actions)
    if pi.probs.shape != expected:
        raise InvalidArgumentError(MODULE, f"policy shape {pi.probs.shape} does not match model {expected}")


def _occupancy_values(model: CmdpModel, nu: ArrayLike) -> np.ndarray:
    values = nu.values if isinstance(nu, OccupancyMeasure) else np.asarray(nu, dtype=float)
    expected = (model.num_states, model.num_actions)
    if values.size != model.num_states * model.num_actions:
        raise InvalidArgumentError(MODULE, f"occupancy size {values.size} does not match model {expected}")
    return values.reshape(expected)


def flow_matrix(model: CmdpModel) -> FlowMatrix:
    """Build A[(s,a), s'] = 1{s'=s} - gamma P(s'|s,a) with rows in (s, a) row-major order."""
    S, A = model.num_states, model.num_actions
    identity_rows = np.repeat(np.eye(S), A, axis=0)
    entries = identity_rows - model.discount * model.transition.reshape(S * A, S)
    entries.flags.writeable = False
    return FlowMatrix(entries=entries)


def effective_sparsity(model: CmdpModel) -> int:
    """N = min(|S||A|, |S| + I), the support bound of an optimal basic solution."""
    return model.dims.effective_sparsity


def shifted_utilities(model: CmdpModel, kappa: float) -> np.ndarray:
    """u_i^kappa = u_i - (1 - gamma) kappa, shape (I, S, A)."""
    return model.utilities - (1.0 - model.discount) * kappa


def policy_transition(model: CmdpModel, pi: Policy) -> np.ndarray:
    """State transition matrix P_pi[s, s'] = sum_a pi(a|s) P(s'|s,a)."""
    _check_policy(model, pi)
    return np.einsum("sa,sat->st", pi.probs, model.transition)


def state_occupancy(model: CmdpModel, pi: Policy) -> np.ndarray:
    """
    Discounted state visitation nu_pi(s).

    Solves (I - gamma P_pi^T) nu_pi = rho0 by LU factorization with partial
    pivoting. The system is nonsingular for gamma < 1, so a failed solve
    signals numerical misconfiguration.
    """
    P_pi = policy_transition(model, pi)
    system = np.eye(model.num_states) - model.discount * P_pi.T
    try:
        factors = linalg.lu_factor(system, check_finite=True)
        solution = linalg.lu_solve(factors, model.initial_dist)
    except (linalg.LinAlgError, ValueError) as exc:
        raise SolverError(MODULE, f"occupancy linear solve failed: {exc}") from exc
    if not np.all(np.isfinite(solution)):
        raise SolverError(MODULE, "occupancy linear solve produced non-finite values")
    # Exact solution is nonnegative; clip rounding noise.
    return np.maximum(solution, 0.0)


def occupancy_of_policy(model: CmdpModel, pi: Policy) -> OccupancyMeasure:
    """nu^pi(s,a) = pi(a|s) nu_pi(s)."""
    d = state_occupancy(model, pi)
    return OccupancyMeasure(values=d[:, None] * pi.probs)


def policy_of_occupancy(nu: ArrayLike) -> Policy:
    """
    Row-normalize an occupancy measure into a policy.

    Rows with total mass below the zero-mass threshold map to the uniform
    distribution.
    """
    values = nu.values if isinstance(nu, OccupancyMeasure) else np.asarray(nu, dtype=float)
    if values.ndim != 2:
        raise InvalidArgumentError(MODULE, f"occupancy must have shape (S, A), got {values.shape}")
    if not np.all(np.isfinite(values)):
        raise InvalidArgumentError(MODULE, "occupancy has non-finite entries")
    if np.any(values < 0.0):
        raise InvalidArgumentError(MODULE, "occupancy has negative entries")
    mass = values.sum(axis=1, keepdims=True)
    degenerate = mass[:, 0] < get_numeric_config().ZERO_MASS
    probs = np.empty_like(values)
    probs[~degenerate] = values[~degenerate] / mass[~degenerate]
    probs[degenerate] = 1.0 / values.shape[1]
    return Policy(probs=probs)


def evaluate(model: CmdpModel, pi: Policy) -> Tuple[float, np.ndarray]:
    """
    Exact discounted values of a policy.

    Returns:
        (J(pi), [J_i^u(pi)]_i) computed as inner products with nu^pi.
    """
    nu = occupancy_of_policy(model, pi).values
    reward_value = float(np.sum(nu * model.reward))
    utility_values = np.einsum("isa,sa->i", model.utilities, nu)
    return reward_value, utility_values


def evaluate_occupancy(model: CmdpModel, nu: ArrayLike) -> Tuple[float, np.ndarray]:
    """<nu, r> and <nu, u_i> for an arbitrary (not necessarily valid) occupancy vector."""
    values = _occupancy_values(model, nu)
    return float(np.sum(values * model.reward)), np.einsum("isa,sa->i", model.utilities, values)


def flow_residual(model: CmdpModel, nu: ArrayLike) -> np.ndarray:
    """A^T nu - rho0 = sum_a (I - gamma P_a) nu_a - rho0."""
    values = _occupancy_values(model, nu)
    inflow = np.einsum("sa,sat->t", values, model.transition)
    return values.sum(axis=1) - model.discount * inflow - model.initial_dist


def violation(model: CmdpModel, pi: Policy) -> float:
    """sum_i [J_i^u(pi)]_-, zero exactly when pi is safe."""
    _, utility_values = evaluate(model, pi)
    return float(np.sum(np.maximum(-utility_values, 0.0)))
