"""
Instance Generators
===================

CMDP families used to stress and validate the solvers:

- ``hard``: replicated constrained bandit blocks whose optimal policy spreads
  its mass over the arms with a positive sign bit, plus unconstrained blocks
  and an absorbing null state that soaks up reference mass;
- ``slater``: a single-constraint instance with exactly one safe policy;
- ``random``: Dirichlet kernels with utilities shifted until a target Slater
  margin holds.

Hard-instance state layout: block j occupies states 4j (s0), 4j+1 (s1),
4j+2 (s+), 4j+3 (s-); the null state is last. Slater layout: s0 = 0, s+ = 1,
s- = 2, s^j = 3+j, null state last.
"""

from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from ..core.exceptions import PreconditionError
from ..core.rng import RngStream, make_rng
from ..models.cmdp import CmdpModel, HardInstance, Policy
from ..models.requests import HardInstanceParams, RandomInstanceParams, SlaterInstanceParams
from .base import BaseService
from .lp_oracle import LpOracleService

MODULE = "instances"
RANDOM_SHIFT_ATTEMPTS = 100

S0, S1, S_PLUS, S_MINUS = 0, 1, 2, 3


class BlockConstants(NamedTuple):
    """Per-block transition and visitation constants for one discount."""

    p: float
    q: float
    v0: float
    v1: float
    v: float


def block_constants(gamma: float) -> BlockConstants:
    """p = 1/(2-g), q = 2-1/g, v0 = 2/(2+g), v1 = 2g/((2+g)(2-g)), v = g^2/((2+g)(2-g))."""
    denom = (2.0 + gamma) * (2.0 - gamma)
    return BlockConstants(
        p=1.0 / (2.0 - gamma),
        q=2.0 - 1.0 / gamma,
        v0=2.0 / (2.0 + gamma),
        v1=2.0 * gamma / denom,
        v=gamma ** 2 / denom,
    )


def block_masses(params: HardInstanceParams) -> Tuple[float, float]:
    """Initial mass (rho_c, rho_u) placed on each constrained / unconstrained s0."""
    if params.S_u > 0:
        return 1.0 / (2 * params.S_c), 1.0 / (2 * params.S_u)
    return 1.0 / params.S_c, 0.0


def block_state(j: int, role: int) -> int:
    """Model index of state ``role`` (S0, S1, S_PLUS, S_MINUS) in hard block j."""
    return 4 * j + role


def _block_drift(params: HardInstanceParams, probs: np.ndarray, j: int) -> float:
    """r_j(pi): signed drift of block j toward s+ per unit of varpi."""
    s1 = block_state(j, S1)
    if j < params.S_c:
        theta = params.theta_matrix()[j]
        return float(sum(theta[i] * probs[s1, 2 * i] - 0.5 * probs[s1, 2 * i + 1] for i in range(params.K)))
    return float(params.theta_u[j - params.S_c] * probs[s1, 0])


def closed_form_value(params: HardInstanceParams) -> float:
    """J* of the hard instance from the sign bits alone."""
    c = block_constants(params.gamma)
    rho_c, rho_u = block_masses(params)
    constrained = sum((t + 1) / 2 for t in params.theta_c) / (8.0 * params.K)
    unconstrained = sum((t + 1) / 2 for t in params.theta_u)
    return c.v / (1.0 - params.gamma) * (params.varpi_c * rho_c * constrained + params.varpi_u * rho_u * unconstrained)


def closed_form_state_occupancy(params: HardInstanceParams, policy: Policy) -> np.ndarray:
    """
    State visitation of ``policy`` on the hard instance.

    Per block with initial mass rho: nu(s0) = rho v0/(1-g), nu(s1) = rho v1,
    nu(s+/-) = rho v/(1-g) (1 +/- varpi r_j(pi))/2; the null state is never visited.
    """
    c = block_constants(params.gamma)
    rho_c, rho_u = block_masses(params)
    blocks = params.S_c + params.S_u
    horizon = 1.0 / (1.0 - params.gamma)
    nu = np.zeros(4 * blocks + 1)
    for j in range(blocks):
        rho, varpi = (rho_c, params.varpi_c) if j < params.S_c else (rho_u, params.varpi_u)
        drift = varpi * _block_drift(params, policy.probs, j)
        nu[block_state(j, S0)] = rho * c.v0 * horizon
        nu[block_state(j, S1)] = rho * c.v1
        nu[block_state(j, S_PLUS)] = rho * c.v * horizon * (1.0 + drift) / 2.0
        nu[block_state(j, S_MINUS)] = rho * c.v * horizon * (1.0 - drift) / 2.0
    return nu


def slater_constraint_value(params: SlaterInstanceParams, policy: Policy) -> float:
    """
    J^u(pi) = -v varpi/(S(1-g)) sum_j r_j(pi), where r_j is the mass pi puts on
    the unsafe arms of s^j; equals -v varpi ||pi_b - theta||_1/(S(1-g)) on {a, b}.
    """
    c = block_constants(params.gamma)
    unsafe = 0.0
    for j, bit in enumerate(params.theta):
        row = policy.probs[3 + j]
        unsafe += bit * row[0] + (1 - bit) * row[1] + row[2:].sum()
    return -c.v * params.varpi * unsafe / (params.S * (1.0 - params.gamma))


def random_signs(count: int, rng: np.random.Generator) -> List[int]:
    return [int(v) for v in rng.choice([-1, 1], size=count)]


class InstanceService(BaseService):
    """Builds hard, Slater-violating and random CMDPs."""

    module = MODULE

    def __init__(self, oracle: Optional[LpOracleService] = None, **kwargs):
        super().__init__(**kwargs)
        self.oracle = oracle or LpOracleService(settings=self.settings, numeric=self.numeric)

    def build_hard_cmdp(self, params: HardInstanceParams) -> HardInstance:
        """
        Constrained blocks use actions a_i = 2i, b_i = 2i+1 and e = 2K; unconstrained
        blocks use a = 0 and e = 1. Spare action slots at s1 copy e, and action-free
        states repeat their kernel on every slot with reference mass on slot 0.
        Each sign pair (i, j) contributes the constraints pi(a_i|s1) <= pi(b_i|s1)
        and pi(b_i|s1) <= 1/(4K), the latter shifted into J^u >= 0 form.
        """
        c = block_constants(params.gamma)
        gamma, K, S_c, C = params.gamma, params.K, params.S_c, params.C
        rho_c, rho_u = block_masses(params)
        blocks = S_c + params.S_u
        num_states, A = 4 * blocks + 1, params.A
        null = num_states - 1

        P = np.zeros((num_states, A, num_states))
        reward = np.zeros((num_states, A))
        utilities = np.zeros((2 * K * S_c, num_states, A))
        rho0 = np.zeros(num_states)
        mu = np.zeros((num_states, A))
        pi = np.zeros((num_states, A))
        theta_c = params.theta_matrix()

        for j in range(blocks):
            s0, s1, sp, sm = (block_state(j, role) for role in (S0, S1, S_PLUS, S_MINUS))
            constrained = j < S_c
            rho, varpi = (rho_c, params.varpi_c) if constrained else (rho_u, params.varpi_u)

            P[s0, :, s0], P[s0, :, s1] = c.p, 1.0 - c.p
            for s in (sp, sm):
                P[s, :, s], P[s, :, s0] = c.q, 1.0 - c.q
            P[s1, :, sp] = P[s1, :, sm] = 0.5
            reward[sp, :], reward[sm, :] = 1.0, -1.0
            rho0[s0] = rho

            mu[s0, 0] = c.v0 * rho / C
            mu[sp, 0] = 0.75 * c.v * rho / C
            mu[sm, 0] = 0.5 * c.v * rho / C
            pi[s0, 0] = pi[sp, 0] = pi[sm, 0] = 1.0
            arm_mass = c.v1 * (1.0 - gamma) * rho / C

            if constrained:
                for i in range(K):
                    theta = theta_c[j][i]
                    a_i, b_i = 2 * i, 2 * i + 1
                    P[s1, a_i, sp], P[s1, a_i, sm] = (1.0 + varpi * theta) / 2.0, (1.0 - varpi * theta) / 2.0
                    P[s1, b_i, sp], P[s1, b_i, sm] = (1.0 - varpi / 2.0) / 2.0, (1.0 + varpi / 2.0) / 2.0
                    row = 2 * (j * K + i)
                    utilities[row, s1, a_i], utilities[row, s1, b_i] = -1.0, 1.0
                    utilities[row + 1, s1, b_i] = -1.0
                    mu[s1, a_i] = mu[s1, b_i] = arm_mass / (4 * K)
                    pi[s1, a_i] = pi[s1, b_i] = (theta == 1) / (4.0 * K)
                mu[s1, 2 * K] = arm_mass
                pi[s1, 2 * K] = 1.0 - pi[s1, : 2 * K].sum()
            else:
                theta = params.theta_u[j - S_c]
                P[s1, 0, sp], P[s1, 0, sm] = (1.0 + varpi * theta) / 2.0, (1.0 - varpi * theta) / 2.0
                mu[s1, 0] = mu[s1, 1] = arm_mass
                pi[s1, 0 if theta == 1 else 1] = 1.0

        # <nu, 1> = 1/(1-g) turns the budget rows into J^u >= 0.
        utilities[1::2] += (1.0 - gamma) * rho_c * c.v1 / (4 * K)
        P[null, :, null] = 1.0
        pi[null, 0] = 1.0
        mu[null, 0] = 1.0 - mu.sum()

        model = CmdpModel(discount=gamma, transition=P, reward=reward, utilities=utilities, initial_dist=rho0)
        instance = HardInstance(
            model=model,
            mu=mu,
            optimal_policy=Policy(probs=pi),
            optimal_value=closed_form_value(params),
            family="hard",
            params=params.model_dump(),
        )
        self.logger.info(
            "Hard instance built", states=num_states, actions=A, constraints=utilities.shape[0], K=K, S_c=S_c, S_u=params.S_u
        )
        return instance

    def build_slater_instance(self, params: SlaterInstanceParams) -> HardInstance:
        """
        Single constraint u(s+) = 1, u(s-) = -1 and no reward. At s^j action a = 0
        is unsafe when theta_j = 1 and b = 1 is unsafe when theta_j = 0; spare slots
        are always unsafe, so the only safe policy picks the safe arm everywhere.
        """
        c = block_constants(params.gamma)
        S, A, C, gamma, varpi = params.S, params.A, params.C, params.gamma, params.varpi
        num_states = S + 4
        s0, sp, sm, null = 0, 1, 2, num_states - 1

        P = np.zeros((num_states, A, num_states))
        utilities = np.zeros((1, num_states, A))
        rho0 = np.zeros(num_states)
        mu = np.zeros((num_states, A))
        pi = np.zeros((num_states, A))

        P[s0, :, s0] = c.p
        P[s0, :, 3:3 + S] = (1.0 - c.p) / S
        for s in (sp, sm):
            P[s, :, s], P[s, :, s0] = c.q, 1.0 - c.q
        P[null, :, null] = 1.0
        utilities[0, sp, :], utilities[0, sm, :] = 1.0, -1.0
        rho0[s0] = 1.0

        for j, bit in enumerate(params.theta):
            s = 3 + j
            P[s, :, sp], P[s, :, sm] = (1.0 - varpi) / 2.0, (1.0 + varpi) / 2.0
            P[s, 0, sp], P[s, 0, sm] = (1.0 - varpi * bit) / 2.0, (1.0 + varpi * bit) / 2.0
            P[s, 1, sp], P[s, 1, sm] = (1.0 - varpi * (1 - bit)) / 2.0, (1.0 + varpi * (1 - bit)) / 2.0
            mu[s, 0] = mu[s, 1] = c.v1 * (1.0 - gamma) / (S * C)
            pi[s, 0], pi[s, 1] = 1.0 - bit, float(bit)

        mu[s0, 0] = c.v0 / C
        mu[sp, 0] = mu[sm, 0] = c.v / C
        pi[s0, 0] = pi[sp, 0] = pi[sm, 0] = pi[null, 0] = 1.0
        mu[null, 0] = 1.0 - mu.sum()

        model = CmdpModel(discount=gamma, transition=P, reward=np.zeros((num_states, A)), utilities=utilities, initial_dist=rho0)
        self.logger.info("Slater instance built", states=num_states, actions=A)
        return HardInstance(
            model=model,
            mu=mu,
            optimal_policy=Policy(probs=pi),
            optimal_value=0.0,
            family="slater",
            params=params.model_dump(),
        )

    def random_cmdp(self, params: RandomInstanceParams) -> CmdpModel:
        """
        Dirichlet(1) kernels and initial distribution, rewards and utilities
        uniform on [-1, 1]. While the Slater margin is below target the
        utilities are pulled toward 1 by u <- (1-w) u + w, which raises the
        margin from phi to at least (1-w) phi + w.

        Raises:
            PreconditionError: the margin is still short after the attempt cap
        """
        rng = make_rng(params.seed, RngStream.INSTANCE)
        S, A, I = params.S, params.A, params.I
        transition = rng.dirichlet(np.ones(S), size=(S, A))
        reward = rng.uniform(-1.0, 1.0, size=(S, A))
        utilities = rng.uniform(-1.0, 1.0, size=(I, S, A))
        rho0 = rng.dirichlet(np.ones(S))

        for attempt in range(RANDOM_SHIFT_ATTEMPTS):
            model = CmdpModel(discount=params.gamma, transition=transition, reward=reward, utilities=utilities, initial_dist=rho0)
            phi = self.oracle.slater_margin(model)
            if phi >= params.slater_target:
                self.logger.info("Random CMDP generated", S=S, A=A, I=I, slater_margin=phi, shifts=attempt, seed=params.seed)
                return model
            weight = min(1.0, (params.slater_target - phi + self.numeric.LP_OPT_TOL) / (1.0 - phi))
            utilities = (1.0 - weight) * utilities + weight
        raise PreconditionError(
            self.module,
            f"Slater margin stayed below {params.slater_target} after {RANDOM_SHIFT_ATTEMPTS} shifts; lower slater_target",
        )

    def mixture_reference(self, model: CmdpModel, weight: float, occupancy: Optional[np.ndarray] = None) -> np.ndarray:
        """mu = weight (1-g) nu* + (1-weight) uniform; finite C* whenever weight < 1."""
        self.require(0.0 <= weight <= 1.0, f"mixture weight must lie in [0, 1], got {weight}")
        if occupancy is None:
            _, nu_star = self.oracle.solve_cmdp(model)
            occupancy = nu_star.values
        normalized = (1.0 - model.discount) * np.asarray(occupancy, dtype=float)
        normalized = normalized / normalized.sum()
        uniform = np.full(normalized.shape, 1.0 / normalized.size)
        return weight * normalized + (1.0 - weight) * uniform


def random_hard_params(
    S: int, A: int, I: int, C: float, gamma: float, seed: int, varpi_c: float = 0.5, varpi_u: float = 0.5
) -> HardInstanceParams:
    """Hard-instance parameters with sign bits drawn from the instance RNG stream."""
    counts = HardInstanceParams.block_counts(S, A, I)
    rng = make_rng(seed, RngStream.INSTANCE)
    return HardInstanceParams(
        S=S,
        A=A,
        I=I,
        C=C,
        gamma=gamma,
        theta_c=random_signs(counts["S_c"] * counts["K"], rng),
        theta_u=random_signs(counts["S_u"], rng),
        varpi_c=varpi_c,
        varpi_u=varpi_u,
    )


def random_slater_params(S: int, A: int, C: float, gamma: float, seed: int, varpi: float = 0.5) -> SlaterInstanceParams:
    rng = make_rng(seed, RngStream.INSTANCE)
    return SlaterInstanceParams(S=S, A=A, C=C, gamma=gamma, theta=[int(b) for b in rng.integers(0, 2, size=S)], varpi=varpi)


def build_hard_cmdp(params: HardInstanceParams) -> HardInstance:
    return InstanceService().build_hard_cmdp(params)


def build_slater_instance(params: SlaterInstanceParams) -> HardInstance:
    return InstanceService().build_slater_instance(params)


def random_cmdp(S: int, A: int, I: int, gamma: float, slater_target: float = 0.1, seed: int = 0) -> CmdpModel:
    """Random well-conditioned CMDP; see ``InstanceService.random_cmdp``."""
    params = RandomInstanceParams(S=S, A=A, I=I, gamma=gamma, slater_target=slater_target, seed=seed)
    return InstanceService().random_cmdp(params)
