"""
DPDL Solver
===========

Deviation-controlled primal-dual learning on an offline dataset.

The solver estimates a floored reference distribution mu_hat from the first
N_e tuples, then runs T steps of stochastic mirror descent-ascent on the
reweighted Lagrangian

    L(V, lambda, x) = r'Wx + V'(rho0 - A'Wx) + lambda' U_kappa W x

with one fresh tuple per step: Euclidean truncation for V, an exponentiated
step with an l1 cap for lambda and the constrained KL prox for x. The output
policy is read off the averaged x iterate.

The solver only ever sees model dimensions and data; simulator-side
quantities reach it through the optional checkpoint monitor.
"""

import math
import time
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from ..core.exceptions import DataExhaustedError, InvalidArgumentError, SolverError
from ..core.rng import RngStream, make_rng
from ..models.cmdp import ModelDims
from ..models.dataset import NO_INITIAL_STATE, OfflineDataset, SampleTuple
from ..models.requests import DpdlConfig, FeasibleRegions
from ..models.responses import Checkpoint, ReferenceEstimate, SolveReport
from .base import BaseService
from .cmdp_algebra import policy_of_occupancy
from .kl_prox import KlProxSolver
from .sampling import DatasetStream

MODULE = "dpdl"

# (t, x_bar, V_bar, lambda_bar) -> optional diagnostics for the checkpoint row
CheckpointMonitor = Callable[[int, np.ndarray, np.ndarray, np.ndarray], Optional[Dict[str, float]]]


def eta_cap(config: DpdlConfig, dims: ModelDims) -> float:
    """Largest stepsize allowed by the gradient magnitude bounds."""
    horizon_inv = 1.0 - dims.discount
    m_x = 64.0 / (config.phi * horizon_inv * config.varsigma)
    cap = config.alpha_x / m_x
    if dims.num_constraints:
        m_lambda = 2.0 * config.psi / horizon_inv
        cap = min(cap, config.alpha_lambda / m_lambda)
    return 0.5 * cap


def default_schedule(
    epsilon: float,
    delta: float,
    psi: float,
    phi: float,
    dims: ModelDims,
    T: Optional[int] = None,
    seed: int = 0,
    budget_multiplier: float = 1.0,
) -> DpdlConfig:
    """
    Fill every DPDL constant from (epsilon, delta, psi, phi).

    The default T uses a unit leading constant and is a heuristic budget;
    pass T explicitly for controlled experiments.

    Raises:
        InvalidArgumentError: epsilon outside (0, 1/(10(1-gamma))], psi < 1 or phi <= 0
    """
    gamma = dims.discount
    horizon_inv = 1.0 - gamma
    upper = 1.0 / (10.0 * horizon_inv)
    if not 0.0 < epsilon <= upper:
        raise InvalidArgumentError(MODULE, f"epsilon must lie in (0, 1/(10(1-gamma))] = (0, {upper:.6g}], got {epsilon}")
    if psi < 1.0:
        raise InvalidArgumentError(MODULE, f"psi must be >= 1, got {psi}")
    if phi <= 0.0:
        raise InvalidArgumentError(MODULE, f"phi must be positive, got {phi}")
    if not 0.0 < delta < 1.0:
        raise InvalidArgumentError(MODULE, f"delta must lie in (0, 1), got {delta}")

    S, SA, I = dims.num_states, dims.num_pairs, dims.num_constraints
    N = dims.effective_sparsity
    eps_e = epsilon / 100.0
    varsigma = phi * horizon_inv ** 2 * eps_e / (2.0 * N * psi)
    N_e = math.ceil(512.0 * N * psi / (phi ** 2 * horizon_inv ** 4 * eps_e ** 2) * math.log(6.0 * SA / delta))
    if T is None:
        T = math.ceil(
            budget_multiplier * N * psi * math.log(psi * SA * max(I, 1) / delta) / (phi ** 2 * horizon_inv ** 4 * epsilon ** 2)
        )
    config = DpdlConfig(
        T=T,
        epsilon=epsilon,
        delta=delta,
        psi=psi,
        phi=phi,
        kappa=5.0 * phi * epsilon,
        eta=1.0 / math.sqrt(T) if T > 0 else 1.0,
        alpha_V=phi * math.sqrt(psi / S),
        alpha_lambda=math.sqrt(psi / math.log(max(I, 2))) / horizon_inv,
        alpha_x=math.sqrt(N * psi / math.log(max(psi, math.e))) / (phi * horizon_inv),
        N_e=N_e,
        varsigma=varsigma,
        seed=seed,
    )
    return config.model_copy(update={"eta_cap_satisfied": config.eta <= eta_cap(config, dims)})


def estimate_reference(dataset: OfflineDataset, N_e: int, varsigma: float) -> ReferenceEstimate:
    """
    mu_hat(s,a) = max(N(s,a)/N_e, varsigma) over the first N_e tuples.

    Raises:
        DataExhaustedError: fewer than N_e tuples
    """
    if varsigma <= 0.0:
        raise InvalidArgumentError(MODULE, f"varsigma must be positive, got {varsigma}")
    if len(dataset) < N_e:
        raise DataExhaustedError(MODULE, required=N_e, available=len(dataset))
    S, A = dataset.dims.num_states, dataset.dims.num_actions
    pairs = dataset.s[:N_e] * A + dataset.a[:N_e]
    counts = np.bincount(pairs, minlength=S * A).reshape(S, A)
    mu_hat = np.maximum(counts / N_e, varsigma)
    return ReferenceEstimate(mu_hat=mu_hat, counts=counts, varsigma=varsigma, N_e=N_e)


@dataclass
class GradientSample:
    """Stochastic gradients at one tuple; g_x is one-hot at (s, a)."""

    g_V: np.ndarray
    g_lambda: np.ndarray
    g_x: np.ndarray


@dataclass
class DpdlState:
    """Primal-dual iterate (V, lambda, x) with x flattened over (s, a)."""

    V: np.ndarray
    lam: np.ndarray
    x: np.ndarray
    t: int = 0

    @classmethod
    def initial(cls, dims: ModelDims, phi: float, mu_hat: np.ndarray) -> "DpdlState":
        I = dims.num_constraints
        N = dims.effective_sparsity
        return cls(
            V=np.zeros(dims.num_states),
            lam=np.full(I, 1.0 / (phi * I)) if I else np.zeros(0),
            x=(N / dims.num_pairs) * np.asarray(mu_hat, dtype=float).reshape(-1) / (1.0 - dims.discount),
        )

    def feasibility_violation(self, regions: FeasibleRegions, mu_hat: np.ndarray) -> float:
        """Largest absolute violation of the three feasible sets."""
        mu_flat = np.asarray(mu_hat, dtype=float).reshape(-1)
        terms = [
            float(np.max(np.abs(self.V), initial=0.0)) - regions.R_V,
            float(self.lam.sum()) - regions.R_Lambda,
            float(-self.lam.min(initial=0.0)),
            float(np.max(self.x / mu_flat)) - regions.x_cap_per_coord,
            float(np.sum(self.x / mu_flat)) - regions.x_cap_aggregate,
            float(self.x.sum()) - regions.x_cap_mass,
        ]
        if np.any(self.x <= 0.0):
            terms.append(float(-self.x.min()))
        return max(0.0, max(terms))


def gradient_estimators(
    state: DpdlState,
    sample: SampleTuple,
    mu_hat: np.ndarray,
    kappa: float,
    discount: float,
) -> GradientSample:
    """
    Unbiased estimators of the Lagrangian gradients from one tuple.

    g_V = 1_{s0} + (x(s,a)/mu_hat(s,a)) (gamma 1_{s'} - 1_s)
    g_lambda = (x(s,a)/mu_hat(s,a)) u^kappa(s,a)
    g_x = (r - V(s) + gamma V(s') + <u^kappa(s,a), lambda>)/mu_hat(s,a) at (s,a)
    """
    mu_hat = np.asarray(mu_hat, dtype=float)
    S, A = mu_hat.shape
    k = sample.s * A + sample.a
    weight = state.x[k] / mu_hat[sample.s, sample.a]
    u_kappa = np.asarray(sample.u, dtype=float) - (1.0 - discount) * kappa

    g_V = np.zeros(S)
    g_V[sample.s0] += 1.0
    g_V[sample.s_next] += discount * weight
    g_V[sample.s] -= weight
    g_lambda = weight * u_kappa
    g_x = np.zeros((S, A))
    g_x[sample.s, sample.a] = (
        sample.r - state.V[sample.s] + discount * state.V[sample.s_next] + float(u_kappa @ state.lam)
    ) / mu_hat[sample.s, sample.a]
    return GradientSample(g_V=g_V, g_lambda=g_lambda, g_x=g_x)


def update_V(V: np.ndarray, g_V: np.ndarray, eta: float, alpha_V: float, R_V: float) -> np.ndarray:
    """Euclidean step followed by truncation to the l_inf ball."""
    return np.clip(V - (eta / alpha_V) * g_V, -R_V, R_V)


def update_lambda(lam: np.ndarray, g_lambda: np.ndarray, eta: float, alpha_lambda: float, R_Lambda: float) -> np.ndarray:
    """Exponentiated step, rescaled onto the capped positive l1 ball."""
    half = lam * np.exp(-(eta / alpha_lambda) * g_lambda)
    mass = float(half.sum())
    return half * min(R_Lambda / mass, 1.0) if mass > 0.0 else half


class KahanAverager:
    """
    Lazy time-average of a vector whose coordinates change sparsely.

    A coordinate's value is credited for every step it was held once it
    changes (or at read time), with compensated summation.
    """

    def __init__(self, initial: np.ndarray):
        self.value = np.array(initial, dtype=float)
        self.total = np.zeros_like(self.value)
        self.comp = np.zeros_like(self.value)
        self.since = np.zeros(self.value.size, dtype=np.int64)

    def _credit(self, index, now: int) -> None:
        held = now - self.since[index]
        term = self.value[index] * held - self.comp[index]
        new_total = self.total[index] + term
        self.comp[index] = (new_total - self.total[index]) - term
        self.total[index] = new_total
        self.since[index] = now

    def set(self, index: int, value: float, now: int) -> None:
        """Coordinate ``index`` takes ``value`` from step ``now`` onwards."""
        if self.value[index] != value:
            self._credit(index, now)
            self.value[index] = value

    def set_all(self, values: np.ndarray, now: int) -> None:
        self._credit(slice(None), now)
        self.value[:] = values

    def mean(self, now: int) -> np.ndarray:
        """Average of the values held over steps [0, now)."""
        if now <= 0:
            return self.value.copy()
        pending = self.value * (now - self.since)
        return (self.total + (pending - self.comp)) / now


class DpdlSolver(BaseService):
    """Single DPDL run for fixed dimensions and configuration."""

    module = MODULE

    def __init__(self, dims: ModelDims, config: DpdlConfig, **kwargs):
        super().__init__(**kwargs)
        self.dims = dims
        self.config = config
        self.regions = FeasibleRegions.build(config.psi, config.phi, dims.discount, dims.effective_sparsity)
        cap = eta_cap(config, dims)
        self.eta_cap_satisfied = config.eta <= cap
        if not self.eta_cap_satisfied:
            if self.settings.strict_eta_cap:
                raise InvalidArgumentError(self.module, f"stepsize {config.eta:.3e} exceeds the cap {cap:.3e}")
            self.logger.warning("Stepsize above theoretical cap", eta=config.eta, eta_cap=cap)

    def _as_stream(self, data: Union[OfflineDataset, DatasetStream]) -> DatasetStream:
        stream = data if isinstance(data, DatasetStream) else DatasetStream(data)
        dataset_dims = stream.dataset.dims
        if (dataset_dims.num_states, dataset_dims.num_actions, dataset_dims.num_constraints) != (
            self.dims.num_states, self.dims.num_actions, self.dims.num_constraints
        ):
            raise InvalidArgumentError(self.module, "dataset dimensions do not match the model dimensions")
        return stream

    def run(
        self,
        data: Union[OfflineDataset, DatasetStream],
        initial_dist: Optional[np.ndarray] = None,
        monitor: Optional[CheckpointMonitor] = None,
        checkpoint_count: Optional[int] = None,
    ) -> SolveReport:
        """
        Estimate mu_hat, run T iterations and average.

        Args:
            data: Dataset (or a stream positioned at the first unused tuple)
            initial_dist: rho0, used to draw s0 for tuples without a stored draw
            monitor: Called at each checkpoint with (t, x_bar, V_bar, lambda_bar)
            checkpoint_count: Number of checkpoint rows (defaults to settings)

        Returns:
            SolveReport with the averaged iterates and the checkpoint curve
        """
        config, dims = self.config, self.dims
        stream = self._as_stream(data)
        needed = config.N_e + config.T
        if stream.remaining < needed:
            raise DataExhaustedError(self.module, required=needed, available=stream.remaining)
        reference = estimate_reference(stream.take(config.N_e, self.module), config.N_e, config.varsigma)
        batch = stream.take(config.T, self.module)
        return self._iterate(reference, batch, initial_dist, monitor, checkpoint_count or self.settings.checkpoint_count)

    def _checkpoint_steps(self, count: int) -> List[int]:
        T = self.config.T
        if T == 0:
            return []
        return sorted({max(1, round(T * j / count)) for j in range(1, count + 1)})

    def _iterate(
        self,
        reference: ReferenceEstimate,
        batch: OfflineDataset,
        initial_dist: Optional[np.ndarray],
        monitor: Optional[CheckpointMonitor],
        checkpoint_count: int,
    ) -> SolveReport:
        config, dims, regions = self.config, self.dims, self.regions
        S, A, I = dims.num_states, dims.num_actions, dims.num_constraints
        gamma, T = dims.discount, config.T
        mu_hat = reference.mu_hat.reshape(-1)
        state = DpdlState.initial(dims, config.phi, mu_hat)
        if state.feasibility_violation(regions, mu_hat) > self.numeric.FEASIBILITY_SLACK:
            raise InvalidArgumentError(self.module, "initial x violates the feasible region; varsigma is too large")

        s0 = batch.s0
        if T and np.any(s0 == NO_INITIAL_STATE):
            if initial_dist is None:
                raise InvalidArgumentError(self.module, "initial_dist is required when tuples carry no initial-state draw")
            draws = make_rng(config.seed, RngStream.SOLVER).choice(S, size=T, p=np.asarray(initial_dist, dtype=float))
            s0 = np.where(s0 == NO_INITIAL_STATE, draws, s0)

        prox = KlProxSolver.for_regions(regions, mu_hat)
        step_V = config.eta / config.alpha_V
        step_lambda = config.eta / config.alpha_lambda
        step_x = config.eta / config.alpha_x
        shift = (1.0 - gamma) * config.kappa
        R_V, R_Lambda = regions.R_V, regions.R_Lambda

        V = state.V
        lam = state.lam
        x = state.x
        V_avg = KahanAverager(V)
        x_avg = KahanAverager(x)
        lam_total = np.zeros(I)
        lam_comp = np.zeros(I)
        total_x = float(x.sum())
        weighted_x = float(np.sum(x / mu_hat))

        s_col, a_col, next_col = batch.s.tolist(), batch.a.tolist(), batch.s_next.tolist()
        s0_col, r_col = np.asarray(s0).tolist(), batch.r.tolist()
        u_kappa = batch.u - shift
        checkpoints = set(self._checkpoint_steps(checkpoint_count))
        rows: List[Checkpoint] = []
        full_solves = 0
        started = time.perf_counter()

        for t in range(T):
            s, a, s_next = s_col[t], a_col[t], next_col[t]
            k = s * A + a
            weight = x[k] / mu_hat[k]
            V_s, V_next = V[s], V[s_next]

            if I:
                u_t = u_kappa[t]
                g_x = (r_col[t] - V_s + gamma * V_next + float(u_t @ lam)) / mu_hat[k]
                # lambda average is dense: credit the current iterate before stepping
                term = lam - lam_comp
                new_total = lam_total + term
                lam_comp = (new_total - lam_total) - term
                lam_total = new_total
                lam = update_lambda(lam, weight * u_t, config.eta, config.alpha_lambda, R_Lambda)
            else:
                g_x = (r_col[t] - V_s + gamma * V_next) / mu_hat[k]

            touched: Dict[int, float] = {s0_col[t]: 1.0}
            touched[s_next] = touched.get(s_next, 0.0) + gamma * weight
            touched[s] = touched.get(s, 0.0) - weight
            for j, g_j in touched.items():
                new_value = min(max(V[j] - step_V * g_j, -R_V), R_V)
                V_avg.set(j, new_value, t + 1)
                V[j] = new_value

            g = -step_x * g_x
            fast = prox.try_uncoupled(x[k], k, g, total_x, weighted_x)
            if fast is not None:
                new_xk, total_x, weighted_x = fast
                x_avg.set(k, new_xk, t + 1)
                x[k] = new_xk
            else:
                solution = prox.solve(x, k, g)
                x_avg.set_all(solution.y, t + 1)
                x[:] = solution.y
                total_x = float(x.sum())
                weighted_x = float(np.sum(x / mu_hat))
                full_solves += 1

            step = t + 1
            if step in checkpoints:
                state.t, state.lam = step, lam
                violation = state.feasibility_violation(regions, mu_hat)
                if violation > self.numeric.FEASIBILITY_SLACK:
                    raise SolverError(self.module, f"iterate left the feasible region by {violation:.3e} at t={step}")
                lam_bar = (lam_total - lam_comp) / step if I else np.zeros(0)
                x_bar = x_avg.mean(step)
                extra = monitor(step, x_bar.reshape(S, A), V_avg.mean(step), lam_bar) if monitor else None
                extra = extra or {}
                rows.append(
                    Checkpoint(
                        t=step,
                        gap_estimate=extra.get("gap_estimate"),
                        reward_gap=extra.get("reward_gap"),
                        violation=extra.get("violation"),
                        eta=config.eta,
                        wall_ms=(time.perf_counter() - started) * 1000.0,
                    )
                )
                self.logger.debug("DPDL checkpoint", t=step, full_solves=full_solves)

        x_bar = x_avg.mean(T).reshape(S, A)
        V_bar = V_avg.mean(T)
        lam_bar = (lam_total - lam_comp) / T if (I and T) else lam.copy()
        wall_ms = (time.perf_counter() - started) * 1000.0
        self.logger.info("DPDL run finished", iterations=T, full_solves=full_solves, wall_ms=round(wall_ms, 1))
        return SolveReport(
            policy=policy_of_occupancy(x_bar).probs,
            x_bar=x_bar,
            V_bar=V_bar,
            lambda_bar=lam_bar,
            mu_hat=reference.mu_hat,
            iterations=T,
            checkpoints=rows,
            wall_ms=wall_ms,
            config=config.model_copy(update={"eta_cap_satisfied": self.eta_cap_satisfied}),
            seed=config.seed,
        )


def run_dpdl(
    dims: ModelDims,
    data: Union[OfflineDataset, DatasetStream],
    config: DpdlConfig,
    initial_dist: Optional[np.ndarray] = None,
    monitor: Optional[CheckpointMonitor] = None,
    checkpoint_count: Optional[int] = None,
) -> SolveReport:
    """Functional entry point: one DPDL run."""
    return DpdlSolver(dims, config).run(data, initial_dist=initial_dist, monitor=monitor, checkpoint_count=checkpoint_count)
