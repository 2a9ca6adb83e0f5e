"""
Markov Chain Diagnostics
========================

Stationary distribution, ergodicity checks and exact mixing-time curves for
the state chain induced by a behavior policy.
"""

from typing import Tuple

import numpy as np
from scipy import linalg
from scipy.sparse.csgraph import connected_components

from ..core.config import get_numeric_config
from ..core.exceptions import PreconditionError, SolverError
from ..core.logging import get_logger
from ..models.cmdp import CmdpModel, Policy
from .cmdp_algebra import policy_transition

MODULE = "dataset"
logger = get_logger(__name__)


def is_irreducible(P: np.ndarray) -> bool:
    """A single strongly connected component in the support graph."""
    num_components, _ = connected_components(P > 0.0, directed=True, connection="strong")
    return num_components == 1


def is_primitive(P: np.ndarray) -> bool:
    """
    Irreducible and aperiodic.

    Uses Wielandt's bound: the support matrix is primitive iff its
    ((n-1)^2 + 1)-th power is entrywise positive. Powers are formed by
    repeated boolean squaring.
    """
    n = P.shape[0]
    if not is_irreducible(P):
        return False
    support = (P > 0.0).astype(np.int64)
    exponent, target = 1, (n - 1) ** 2 + 1
    while exponent < target:
        support = ((support @ support) > 0).astype(np.int64)
        exponent *= 2
    return bool(np.all(support > 0))


def is_aperiodic(P: np.ndarray) -> bool:
    """Aperiodicity of an irreducible chain; reducible chains report False."""
    return is_primitive(P)


def chain_stationary(P: np.ndarray) -> np.ndarray:
    """
    Unique stationary distribution of an irreducible chain.

    Solves mu (P - I) = 0 with the last balance equation replaced by the
    normalization sum(mu) = 1.
    """
    n = P.shape[0]
    system = P.T - np.eye(n)
    system[-1, :] = 1.0
    rhs = np.zeros(n)
    rhs[-1] = 1.0
    try:
        mu = linalg.solve(system, rhs)
    except linalg.LinAlgError as exc:
        raise PreconditionError(MODULE, f"stationary distribution is not unique: {exc}") from exc
    mu = np.maximum(mu, 0.0)
    mu /= mu.sum()
    residual = float(np.abs(mu @ P - mu).sum())
    if residual > get_numeric_config().STATIONARY_TOL:
        raise SolverError(MODULE, f"stationary residual {residual:.3e} above tolerance")
    return mu


def _behavior_chain(model: CmdpModel, pi_b: Policy) -> np.ndarray:
    P = policy_transition(model, pi_b)
    if not is_irreducible(P):
        num_components, labels = connected_components(P > 0.0, directed=True, connection="strong")
        raise PreconditionError(MODULE, f"behavior chain is reducible ({num_components} communicating classes, labels {labels.tolist()})")
    return P


def stationary_distribution(model: CmdpModel, pi_b: Policy) -> np.ndarray:
    """mu_{pi_b}(s, a) = mu_{pi_b}(s) pi_b(a|s), shape (S, A)."""
    mu_states = chain_stationary(_behavior_chain(model, pi_b))
    return mu_states[:, None] * pi_b.probs


def worst_case_tv(P_t: np.ndarray, mu: np.ndarray) -> float:
    """E(t) = max_s d_TV(P^t(s, .), mu)."""
    return float(0.5 * np.abs(P_t - mu[None, :]).sum(axis=1).max())


def chain_mixing_time(P: np.ndarray, cap: int = 0) -> Tuple[int, np.ndarray]:
    """
    First t with E(t) <= 1/4, and the curve E(1..4 t_mix).

    Raises:
        PreconditionError: chain not irreducible and aperiodic, or threshold
            not reached within ``cap`` matrix powers
    """
    numeric = get_numeric_config()
    cap = cap or numeric.MIXING_POWER_CAP
    if not is_primitive(P):
        raise PreconditionError(MODULE, "mixing time needs an irreducible aperiodic chain")
    mu = chain_stationary(P)
    curve = []
    P_t = P.copy()
    t_mix = 0
    for t in range(1, cap + 1):
        curve.append(worst_case_tv(P_t, mu))
        if curve[-1] <= numeric.MIXING_THRESHOLD:
            t_mix = t
            break
        P_t = P_t @ P
    if not t_mix:
        raise PreconditionError(MODULE, f"E(t) stayed above {numeric.MIXING_THRESHOLD} for {cap} steps; chain is close to periodic")
    for _ in range(t_mix + 1, 4 * t_mix + 1):
        P_t = P_t @ P
        curve.append(worst_case_tv(P_t, mu))
    logger.debug("Mixing time computed", t_mix=t_mix)
    return t_mix, np.array(curve)


def mixing_time(model: CmdpModel, pi_b: Policy, cap: int = 0) -> Tuple[int, np.ndarray]:
    """Mixing time of the state chain under the behavior policy."""
    return chain_mixing_time(_behavior_chain(model, pi_b), cap)
