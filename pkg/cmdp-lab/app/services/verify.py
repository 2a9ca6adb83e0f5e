"""
Verification and Adaptive Driver
================================

Statistical certification of a DPDL output from fresh tuples, and the
doubling driver that searches the deviation-control level psi when the
concentrability coefficient is unknown.
"""

import math
from typing import Optional, Tuple, Union

import numpy as np

from ..core.exceptions import DataExhaustedError, InvalidArgumentError, RoundCapExceededError
from ..models.cmdp import ModelDims
from ..models.dataset import OfflineDataset
from ..models.requests import DpdlConfig, VerifyThresholds
from ..models.responses import AdaptiveRound, AdaptiveTrace, SolveReport, VerifyReport
from .base import BaseService
from .dpdl import DpdlSolver, default_schedule
from .sampling import DatasetStream

MODULE = "verify-adaptive"


def required_verify_samples(dims: ModelDims, psi: float, phi: float, epsilon: float, delta: float) -> int:
    """N_v = 64 |S| psi l / (phi^2 (1-gamma)^4 eps_ver^2) with eps_ver = eps/10, l = 4 log(40 |S| I / delta)."""
    eps_ver = epsilon / 10.0
    log_term = 4.0 * math.log(40.0 * dims.num_states * max(dims.num_constraints, 1) / delta)
    return math.ceil(64.0 * dims.num_states * psi * log_term / (phi ** 2 * (1.0 - dims.discount) ** 4 * eps_ver ** 2))


class Verifier(BaseService):
    """Estimates value, shifted utilities and flow residual of an averaged iterate."""

    module = MODULE

    def __init__(self, thresholds: Optional[VerifyThresholds] = None, **kwargs):
        super().__init__(**kwargs)
        self.thresholds = thresholds or VerifyThresholds()

    def verify(
        self,
        x_bar: np.ndarray,
        mu_hat: np.ndarray,
        dims: ModelDims,
        data: OfflineDataset,
        epsilon: float,
        kappa: float,
        phi: float,
        rho0: np.ndarray,
        N_v: Optional[int] = None,
    ) -> VerifyReport:
        """
        Single pass over N_v fresh tuples.

        Returns:
            VerifyReport; passed iff ||Delta_p_hat||_1 <= 1.5 phi (1-gamma) eps
            and min_i J_u_hat_i >= -3 phi eps (factors from the thresholds)
        """
        S, A, I = dims.num_states, dims.num_actions, dims.num_constraints
        N_v = len(data) if N_v is None else N_v
        self.require(N_v >= 1, "verification needs at least one tuple")
        if len(data) < N_v:
            raise DataExhaustedError(self.module, required=N_v, available=len(data))
        x_bar = np.asarray(x_bar, dtype=float).reshape(S, A)
        mu_hat = np.asarray(mu_hat, dtype=float).reshape(S, A)
        ratio = x_bar / mu_hat

        s, a, s_next = data.s[:N_v], data.a[:N_v], data.s_next[:N_v]
        pairs = s * A + a
        counts = np.bincount(pairs, minlength=S * A).reshape(S, A)
        transitions = np.bincount(pairs * S + s_next, minlength=S * A * S).reshape(S, A, S)
        weights = ratio[s, a]

        J_hat = float(np.dot(data.r[:N_v], weights) / N_v)
        u_kappa = data.u[:N_v] - (1.0 - dims.discount) * kappa
        J_u_hat = (u_kappa * weights[:, None]).sum(axis=0) / N_v if I else np.zeros(0)
        outflow = (counts * ratio).sum(axis=1) / N_v
        inflow = np.einsum("sat,sa->t", transitions, ratio) / N_v
        Delta_p_hat = outflow - dims.discount * inflow - np.asarray(rho0, dtype=float)

        report = VerifyReport(
            passed=False,
            J_hat=J_hat,
            J_u_hat=J_u_hat,
            Delta_p_hat=Delta_p_hat,
            N_v=N_v,
            flow_threshold=self.thresholds.flow_factor * phi * (1.0 - dims.discount) * epsilon,
            utility_threshold=self.thresholds.utility_factor * phi * epsilon,
        )
        report = report.model_copy(update={"passed": report.decide()})
        self.logger.info("Verification finished", passed=report.passed, J_hat=J_hat, flow_l1=float(np.abs(Delta_p_hat).sum()))
        return report


def verify(
    x_bar: np.ndarray,
    mu_hat: np.ndarray,
    dims: ModelDims,
    data: OfflineDataset,
    epsilon: float,
    kappa: float,
    phi: float,
    rho0: np.ndarray,
    thresholds: Optional[VerifyThresholds] = None,
    N_v: Optional[int] = None,
) -> VerifyReport:
    """Functional entry point for one verification test."""
    return Verifier(thresholds).verify(x_bar, mu_hat, dims, data, epsilon, kappa, phi, rho0, N_v)


class AdaptiveDpdl(BaseService):
    """
    Doubling search over psi.

    Round K runs DPDL at psi_K = psi_init 2^(K-1) with accuracy eps'/15 and
    confidence 6 delta/(pi^2 K^2), verifies on fresh tuples and stops once two
    consecutive rounds verify with value improvement at most
    ``exit_constant * eps``.
    """

    module = MODULE

    def __init__(
        self,
        dims: ModelDims,
        initial_dist: np.ndarray,
        thresholds: Optional[VerifyThresholds] = None,
        round_cap: Optional[int] = None,
        T: Optional[int] = None,
        N_e: Optional[int] = None,
        N_v: Optional[int] = None,
        varsigma: Optional[float] = None,
        eta: Optional[float] = None,
        scale_budget: bool = True,
        seed: int = 0,
        **kwargs,
    ):
        super().__init__(**kwargs)
        self.dims = dims
        self.initial_dist = np.asarray(initial_dist, dtype=float)
        self.thresholds = thresholds or VerifyThresholds()
        self.round_cap = round_cap or self.settings.round_cap
        self.T = T
        self.N_e = N_e
        self.N_v = N_v
        self.varsigma = varsigma
        self.eta = eta
        self.scale_budget = scale_budget
        self.seed = seed
        self.final_report: Optional[SolveReport] = None

    def round_config(self, round_index: int, psi: float, psi_init: float, epsilon: float, delta: float, phi: float) -> DpdlConfig:
        """Schedule for one round with the configured overrides applied."""
        T = self.T
        if T is not None and self.scale_budget:
            T = math.ceil(T * psi / psi_init)
        config = default_schedule(epsilon, delta, psi, phi, self.dims, T=T, seed=self.seed + round_index - 1)
        return config.with_overrides(N_e=self.N_e, varsigma=self.varsigma, eta=self.eta)

    def run(
        self,
        data: Union[OfflineDataset, DatasetStream],
        epsilon: float,
        delta: float,
        phi: float,
        psi_init: float = 1.0,
    ) -> Tuple[np.ndarray, AdaptiveTrace]:
        """
        Run rounds until the exit condition holds.

        Args:
            data: Dataset or stream; each round consumes N_e + T + N_v fresh tuples
            epsilon: Overall target accuracy eps'
            delta: Overall failure probability
            phi: Slater margin
            psi_init: First deviation-control level

        Returns:
            (final policy, trace)

        Raises:
            DataExhaustedError: stream ran out; ``partial`` holds the trace so far
            RoundCapExceededError: no exit within the round cap
        """
        if psi_init < 1.0:
            raise InvalidArgumentError(self.module, f"psi_init must be >= 1, got {psi_init}")
        stream = data if isinstance(data, DatasetStream) else DatasetStream(data)
        eps_round = epsilon / 15.0
        verifier = Verifier(self.thresholds, settings=self.settings)
        trace = AdaptiveTrace()
        previous_J: Optional[float] = None

        for K in range(1, self.round_cap + 1):
            psi = psi_init * 2.0 ** (K - 1)
            delta_K = 6.0 * delta / (math.pi ** 2 * K ** 2)
            try:
                config = self.round_config(K, psi, psi_init, eps_round, delta_K, phi)
                report = DpdlSolver(self.dims, config, settings=self.settings).run(stream, initial_dist=self.initial_dist)
                N_v = self.N_v or required_verify_samples(self.dims, psi, phi, eps_round, delta_K)
                fresh = stream.take(N_v, self.module)
            except DataExhaustedError as exc:
                self.logger.error("Adaptive run out of data", round=K, required=exc.required, available=exc.available)
                raise DataExhaustedError(self.module, exc.required, exc.available, partial=trace) from exc

            result = verifier.verify(
                report.x_bar, report.mu_hat, self.dims, fresh, eps_round, config.kappa, phi, self.initial_dist
            )
            J_K = result.J_hat if result.passed else None
            if J_K is None:
                reason = "verification failed"
            elif previous_J is None:
                reason = "no previous verified round"
            elif J_K - previous_J > self.thresholds.exit_constant * eps_round:
                reason = "improvement above exit threshold"
            else:
                reason = "exit"
            trace.rounds.append(
                AdaptiveRound(round=K, psi=psi, delta=delta_K, epsilon=eps_round, T=config.T, verify=result, J=J_K, exit_reason=reason)
            )
            self.logger.info("Adaptive round finished", round=K, psi=psi, passed=result.passed, reason=reason)
            if reason == "exit":
                trace.final_policy = report.policy
                self.final_report = report
                trace.exit_reason = f"rounds {K - 1} and {K} verified with improvement within the exit threshold"
                return report.policy, trace
            previous_J = J_K

        raise RoundCapExceededError(self.module, self.round_cap, partial=trace)


def adaptive_dpdl(
    dims: ModelDims,
    data: Union[OfflineDataset, DatasetStream],
    epsilon: float,
    delta: float,
    phi: float,
    psi_init: float,
    initial_dist: np.ndarray,
    **options,
) -> Tuple[np.ndarray, AdaptiveTrace]:
    """Functional entry point for the adaptive driver."""
    return AdaptiveDpdl(dims, initial_dist, **options).run(data, epsilon, delta, phi, psi_init)
