import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import optimize

from app.core.exceptions import DataExhaustedError, InvalidArgumentError
from app.models.cmdp import Policy
from app.models.dataset import SampleTuple
from app.models.requests import FeasibleRegions
from app.services.cmdp_algebra import evaluate, shifted_utilities
from app.services.diagnostics import DiagnosticsService
from app.services.dpdl import (
    DpdlSolver,
    DpdlState,
    KahanAverager,
    default_schedule,
    estimate_reference,
    eta_cap,
    gradient_estimators,
    run_dpdl,
    update_lambda,
    update_V,
)
from app.services.instances import random_cmdp
from app.services.kl_prox import KktCase, KlProxSolver, update_x
from app.services.lp_oracle import LpOracleService
from app.services.markov import mixing_time, stationary_distribution
from app.services.sampling import DatasetSampler

from .conftest import GAMMA, OPT_REWARD, SLATER_MARGIN


def _small_config(two_state, T=400, seed=0):
    config = default_schedule(0.1, 0.1, 2.0, SLATER_MARGIN, two_state.dims, T=T, seed=seed)
    return config.with_overrides(N_e=2_000, varsigma=0.01)


def test_default_schedule_constants(two_state):
    config = default_schedule(0.1, 0.1, 2.0, SLATER_MARGIN, two_state.dims, T=100)
    assert config.kappa == pytest.approx(5.0 * SLATER_MARGIN * 0.1)
    assert config.eta == pytest.approx(0.1)
    N = two_state.dims.effective_sparsity
    assert config.varsigma == pytest.approx(SLATER_MARGIN * (1 - GAMMA) ** 2 * 0.001 / (2 * N * 2.0))
    assert config.eta_cap_satisfied == (config.eta <= eta_cap(config, two_state.dims))


def test_default_schedule_rejects_epsilon_above_range(two_state):
    # 1 / (10 (1 - gamma)) = 0.2
    with pytest.raises(InvalidArgumentError):
        default_schedule(0.25, 0.1, 1.0, SLATER_MARGIN, two_state.dims, T=10)


def test_default_schedule_rejects_psi_below_one(two_state):
    with pytest.raises(InvalidArgumentError):
        default_schedule(0.1, 0.1, 0.5, SLATER_MARGIN, two_state.dims, T=10)


def test_with_overrides_ignores_none(two_state):
    config = _small_config(two_state)
    assert config.with_overrides(N_e=None) is config
    assert config.with_overrides(T=7).T == 7


def test_estimate_reference_floors_counts(sync_dataset):
    estimate = estimate_reference(sync_dataset, 1_000, 0.3)
    assert estimate.counts.sum() == 1_000
    assert np.all(estimate.mu_hat >= 0.3)
    assert_allclose(estimate.mu_hat, np.maximum(estimate.counts / 1_000, 0.3))


def test_estimate_reference_needs_enough_tuples(sync_dataset):
    with pytest.raises(DataExhaustedError):
        estimate_reference(sync_dataset.slice(0, 10), 100, 0.01)


def test_kahan_averager_credits_held_values():
    avg = KahanAverager(np.array([1.0, 5.0]))
    avg.set(0, 3.0, 2)
    assert_allclose(avg.mean(4), [2.0, 5.0])
    avg.set_all(np.array([0.0, 1.0]), 4)
    assert_allclose(avg.mean(8), [1.0, 3.0])


def test_update_V_truncates_to_ball():
    V = update_V(np.zeros(3), np.array([-10.0, 0.0, 10.0]), eta=1.0, alpha_V=1.0, R_V=2.0)
    assert_allclose(V, [2.0, 0.0, -2.0])


def test_update_lambda_stays_in_capped_l1_ball():
    lam = update_lambda(np.array([1.0, 1.0]), np.array([-5.0, -5.0]), eta=1.0, alpha_lambda=1.0, R_Lambda=3.0)
    assert lam.sum() == pytest.approx(3.0)
    assert np.all(lam > 0.0)


def test_kl_prox_uncoupled_step():
    solver = KlProxSolver(caps=[10.0, 10.0], weights=[1.0, 1.0], mass_budget=5.0, ratio_budget=50.0)
    solution = solver.solve(np.array([0.5, 0.5]), 0, -1.0)
    assert solution.case is KktCase.NONE_ACTIVE
    assert_allclose(solution.y, [0.5 * math.e, 0.5])


def test_kl_prox_mass_budget_binds():
    solver = KlProxSolver(caps=[10.0, 10.0, 10.0], weights=[1.0, 1.0, 1.0], mass_budget=1.5, ratio_budget=100.0)
    solution = solver.solve(np.array([0.5, 0.5, 0.5]), 0, -2.0)
    assert solution.case is KktCase.MASS_ACTIVE
    assert solution.y.sum() == pytest.approx(1.5)
    assert solution.y[0] / solution.y[1] == pytest.approx(math.exp(2.0))
    assert solution.residual <= 1e-8


def test_kl_prox_coordinate_cap_binds():
    solver = KlProxSolver(caps=[0.6, 10.0], weights=[1.0, 1.0], mass_budget=50.0, ratio_budget=50.0)
    solution = solver.solve(np.array([0.5, 0.5]), 0, -3.0)
    assert solution.y[0] == pytest.approx(0.6)
    assert solution.y[1] == pytest.approx(0.5)


def test_kl_prox_try_uncoupled_reports_budget_breach():
    solver = KlProxSolver(caps=[10.0, 10.0], weights=[1.0, 1.0], mass_budget=1.2, ratio_budget=50.0)
    assert solver.try_uncoupled(0.5, 0, -1.0, 1.0, 1.0) is None
    y_k, total, weighted = solver.try_uncoupled(0.5, 0, 0.5, 1.0, 1.0)
    assert y_k == pytest.approx(0.5 * math.exp(-0.5))
    assert total == pytest.approx(0.5 + y_k)
    assert weighted == pytest.approx(0.5 + y_k)


def test_update_x_rejects_dense_gradient():
    regions = FeasibleRegions.build(2.0, 0.5, 0.5, 3)
    with pytest.raises(InvalidArgumentError):
        update_x(np.full(4, 0.1), np.ones(4), 0.1, 1.0, regions, np.full(4, 0.25))


def test_dpdl_run_report_shapes_and_feasibility(two_state, sync_dataset):
    config = _small_config(two_state)
    report = DpdlSolver(two_state.dims, config).run(sync_dataset, checkpoint_count=4)
    assert report.iterations == 400
    assert report.policy.shape == (2, 2)
    assert_allclose(report.policy.sum(axis=1), 1.0)
    assert report.lambda_bar.shape == (1,)
    assert [c.t for c in report.checkpoints] == [100, 200, 300, 400]

    regions = FeasibleRegions.build(config.psi, config.phi, GAMMA, 3)
    assert np.all(report.x_bar > 0.0)
    assert np.max(report.x_bar / report.mu_hat) <= regions.x_cap_per_coord * (1 + 1e-9)
    assert report.x_bar.sum() <= regions.x_cap_mass * (1 + 1e-9)
    assert np.max(np.abs(report.V_bar)) <= regions.R_V * (1 + 1e-9)
    assert report.lambda_bar.sum() <= regions.R_Lambda * (1 + 1e-9)


def test_dpdl_is_deterministic_for_fixed_seed_and_data(two_state, sync_dataset):
    config = _small_config(two_state, T=200, seed=4)
    first = run_dpdl(two_state.dims, sync_dataset, config)
    second = run_dpdl(two_state.dims, sync_dataset, config)
    assert_array_equal(first.x_bar, second.x_bar)
    assert_array_equal(first.lambda_bar, second.lambda_bar)


def test_dpdl_monitor_rows_land_in_checkpoints(two_state, sync_dataset):
    seen = []

    def monitor(t, x_bar, V_bar, lambda_bar):
        seen.append(t)
        return {"reward_gap": float(t)}

    report = run_dpdl(two_state.dims, sync_dataset, _small_config(two_state, T=100), monitor=monitor, checkpoint_count=2)
    assert seen == [50, 100]
    assert [c.reward_gap for c in report.checkpoints] == [50.0, 100.0]
    assert report.checkpoints[0].gap_estimate is None


def test_dpdl_raises_when_data_runs_out(two_state, sync_dataset):
    config = _small_config(two_state, T=10_000)
    with pytest.raises(DataExhaustedError):
        DpdlSolver(two_state.dims, config).run(sync_dataset.slice(0, 5_000))


def test_dpdl_needs_initial_dist_for_async_data(two_state):
    data = DatasetSampler().sample_async(two_state, Policy.uniform(2, 2), 3_000, seed=1)
    config = _small_config(two_state, T=100)
    with pytest.raises(InvalidArgumentError):
        DpdlSolver(two_state.dims, config).run(data)
    report = DpdlSolver(two_state.dims, config).run(data, initial_dist=two_state.initial_dist)
    assert report.iterations == 100


@pytest.mark.slow
def test_dpdl_approaches_the_optimum(two_state, uniform_mu):
    data = DatasetSampler().sample_sync(two_state, uniform_mu, 420_000, seed=9)
    config = default_schedule(0.1, 0.1, 2.0, SLATER_MARGIN, two_state.dims, T=400_000).with_overrides(N_e=20_000, varsigma=0.01)
    report = run_dpdl(two_state.dims, data, config)
    reward, utilities = evaluate(two_state, Policy(probs=report.policy))
    assert OPT_REWARD - reward <= 0.2
    assert utilities.min() >= -0.2


def test_gradient_estimators_are_unbiased():
    model = random_cmdp(3, 2, 2, 0.9, seed=4)
    S, A, gamma, kappa = 3, 2, 0.9, 0.05
    rng = np.random.default_rng(0)
    mu = rng.dirichlet(np.ones(S * A)).reshape(S, A)
    mu_hat = rng.dirichlet(np.ones(S * A)).reshape(S, A)
    state = DpdlState(V=rng.normal(size=S), lam=rng.random(2), x=rng.random(S * A))

    expected = {"g_V": np.zeros(S), "g_lambda": np.zeros(2), "g_x": np.zeros((S, A))}
    for s0 in range(S):
        for s in range(S):
            for a in range(A):
                for s_next in range(S):
                    p = model.initial_dist[s0] * mu[s, a] * model.transition[s, a, s_next]
                    sample = SampleTuple(s0, s, a, s_next, model.reward[s, a], model.utilities[:, s, a])
                    grads = gradient_estimators(state, sample, mu_hat, kappa, gamma)
                    for name in expected:
                        expected[name] += p * getattr(grads, name)

    weighted_x = (mu / mu_hat) * state.x.reshape(S, A)
    u_kappa = shifted_utilities(model, kappa)
    flow = np.einsum("sa,sat->t", weighted_x, model.transition)
    assert_allclose(expected["g_V"], model.initial_dist + gamma * flow - weighted_x.sum(axis=1), atol=1e-12)
    assert_allclose(expected["g_lambda"], np.einsum("isa,sa->i", u_kappa, weighted_x), atol=1e-12)
    advantage = (
        model.reward
        - state.V[:, None]
        + gamma * model.transition @ state.V
        + np.einsum("isa,i->sa", u_kappa, state.lam)
    )
    assert_allclose(expected["g_x"], (mu / mu_hat) * advantage, atol=1e-12)


def _prox_objective(y, y0, k, g):
    return g * y[k] + float(np.sum(y * np.log(y / y0) - y + y0))


def _reference_prox(solver, y0, k, g):
    """General-purpose SLSQP solve of the same x-subproblem."""
    n = y0.size
    unit = np.eye(n)[k]
    result = optimize.minimize(
        _prox_objective,
        y0,
        args=(y0, k, g),
        jac=lambda y, *_: np.log(y / y0) + g * unit,
        method="SLSQP",
        bounds=list(zip(np.full(n, 1e-12), solver.a)),
        constraints=[
            {"type": "ineq", "fun": lambda y: solver.B1 - y.sum(), "jac": lambda y: -np.ones(n)},
            {"type": "ineq", "fun": lambda y: solver.B2 - solver.c @ y, "jac": lambda y: -solver.c},
        ],
        options={"ftol": 1e-14, "maxiter": 1_000},
    )
    return result.x


# (y0, caps, weights, B1, B2, k, g, expected case); y0 is feasible in each row
KKT_INSTANCES = [
    ([0.5, 0.5], [10.0, 10.0], [1.0, 1.0], 5.0, 50.0, 0, 1.0, KktCase.NONE_ACTIVE),
    ([0.5, 0.5, 0.5], [10.0] * 3, [1.0] * 3, 1.5, 100.0, 0, -2.0, KktCase.MASS_ACTIVE),
    # growing the expensive coordinate breaks only the weighted budget
    ([1.0, 1.0, 1.0], [50.0] * 3, [2.0, 1.0, 1.0], 30.0, 4.0, 0, -2.0, KktCase.RATIO_ACTIVE),
    # the ratio-only point sheds the c=10 coordinate and keeps too much mass
    ([1.0, 1.0, 1.0, 0.1], [50.0] * 4, [2.0, 0.01, 0.01, 10.0], 3.1, 3.02, 0, -2.0, KktCase.BOTH_ACTIVE),
]


@pytest.mark.parametrize("y0, caps, weights, B1, B2, k, g, case", KKT_INSTANCES)
def test_kl_prox_kkt_cases(y0, caps, weights, B1, B2, k, g, case):
    solver = KlProxSolver(caps=caps, weights=weights, mass_budget=B1, ratio_budget=B2)
    y0 = np.asarray(y0)
    solution = solver.solve(y0, k, g)
    assert solution.case is case
    assert solution.residual <= 1e-8
    reference = _reference_prox(solver, y0, k, g)
    assert _prox_objective(solution.y, y0, k, g) == pytest.approx(_prox_objective(reference, y0, k, g), abs=1e-6)


def test_kl_prox_cases_cover_all_four():
    assert {row[-1] for row in KKT_INSTANCES} == set(KktCase)


def test_kl_prox_matches_general_solver_on_random_instances():
    rng = np.random.default_rng(17)
    for _ in range(300):
        n = int(rng.integers(2, 7))
        y0 = rng.uniform(0.2, 1.5, size=n)
        weights = rng.uniform(0.2, 5.0, size=n)
        caps = y0 * rng.uniform(1.1, 4.0, size=n)
        B1 = y0.sum() * rng.uniform(1.0, 1.3)
        B2 = float(weights @ y0) * rng.uniform(1.0, 1.3)
        k, g = int(rng.integers(n)), float(rng.uniform(-4.0, 2.0))
        solver = KlProxSolver(caps=caps, weights=weights, mass_budget=B1, ratio_budget=B2)

        solution = solver.solve(y0, k, g)
        assert solution.residual <= 1e-8
        assert solution.y.sum() <= B1 * (1 + 1e-12)
        assert weights @ solution.y <= B2 * (1 + 1e-12)
        assert np.all(solution.y <= caps * (1 + 1e-12))
        reference = _reference_prox(solver, y0, k, g)
        assert _prox_objective(solution.y, y0, k, g) == pytest.approx(_prox_objective(reference, y0, k, g), abs=1e-6)


def test_update_V_matches_box_constrained_quadratic():
    rng = np.random.default_rng(5)
    eta, alpha_V, R_V = 0.3, 0.5, 1.0
    for _ in range(20):
        V = rng.uniform(-R_V, R_V, size=4)
        g_V = rng.normal(scale=3.0, size=4)
        result = optimize.minimize(
            lambda z: g_V @ z + (alpha_V / (2 * eta)) * np.sum((z - V) ** 2),
            V,
            jac=lambda z: g_V + (alpha_V / eta) * (z - V),
            method="L-BFGS-B",
            bounds=[(-R_V, R_V)] * 4,
            options={"ftol": 1e-15, "gtol": 1e-12},
        )
        assert_allclose(update_V(V, g_V, eta, alpha_V, R_V), result.x, atol=1e-6)


@pytest.mark.parametrize("scale", [0.1, 4.0])
def test_update_lambda_matches_kl_mirror_step(scale):
    # scale 4.0 pushes the unconstrained step past the l1 cap
    rng = np.random.default_rng(int(scale * 10))
    eta, alpha, R = 0.5, 1.0, 2.0
    binding = 0
    for _ in range(20):
        lam = rng.uniform(0.2, 0.6, size=2)
        g = -scale * rng.uniform(0.0, 1.0, size=2)

        def objective(z):
            return g @ z + (alpha / eta) * float(np.sum(z * np.log(z / lam) - z + lam))

        result = optimize.minimize(
            objective,
            lam,
            jac=lambda z: g + (alpha / eta) * np.log(z / lam),
            method="SLSQP",
            bounds=[(1e-12, None)] * 2,
            constraints=[{"type": "ineq", "fun": lambda z: R - z.sum(), "jac": lambda z: -np.ones(2)}],
            options={"ftol": 1e-15, "maxiter": 1_000},
        )
        stepped = update_lambda(lam, g, eta, alpha, R)
        assert stepped.sum() <= R * (1 + 1e-12)
        assert objective(stepped) == pytest.approx(objective(result.x), abs=1e-6)
        assert_allclose(stepped, result.x, atol=1e-4)
        binding += stepped.sum() >= R * (1 - 1e-12)
    if scale > 1.0:
        assert binding > 0


ACCEPTANCE_EPSILON = 0.05


def _acceptance_config(acceptance, T, seed):
    psi = max(acceptance.concentrability, 1.0)
    config = default_schedule(ACCEPTANCE_EPSILON, 0.1, psi, acceptance.slater_margin, acceptance.model.dims, T=T, seed=seed)
    return config.with_overrides(N_e=50_000, varsigma=0.01)


@pytest.mark.slow
def test_dpdl_is_near_optimal_and_safe_on_random_cmdp(acceptance):
    model, diagnostics = acceptance.model, DiagnosticsService()
    passed = 0
    for seed in range(5):
        config = _acceptance_config(acceptance, 2_000_000, seed)
        data = DatasetSampler().sample_sync(model, acceptance.mu, config.N_e + config.T, seed=100 + seed)
        report = run_dpdl(model.dims, data, config)
        quality = diagnostics.policy_quality(model, report.policy, acceptance.opt_reward)
        passed += quality["reward_gap"] <= 10 * ACCEPTANCE_EPSILON and quality["violation"] <= 10 * ACCEPTANCE_EPSILON
    assert passed >= 4


@pytest.mark.slow
def test_duality_gap_decays_like_inverse_square_root(acceptance):
    model, diagnostics = acceptance.model, DiagnosticsService()
    horizons = [10_000, 40_000, 160_000, 640_000]
    gaps = np.zeros((3, len(horizons)))
    for seed in range(3):
        # shorter runs read a prefix, so mu_hat is shared across horizons
        data = DatasetSampler().sample_sync(model, acceptance.mu, 50_000 + horizons[-1], seed=200 + seed)
        for j, T in enumerate(horizons):
            config = _acceptance_config(acceptance, T, seed)
            report = run_dpdl(model.dims, data, config)
            gaps[seed, j] = diagnostics.duality_gap(
                model, acceptance.mu, report.mu_hat, report.x_bar, config.psi, config.phi, config.kappa
            )
    slope = np.polyfit(np.log(horizons), np.log(gaps.mean(axis=0)), 1)[0]
    assert -0.65 <= slope <= -0.35


@pytest.mark.slow
def test_async_dpdl_on_fast_mixing_chain():
    model = random_cmdp(4, 2, 1, 0.9, seed=3)
    pi_b = Policy.uniform(4, 2)
    t_mix, _ = mixing_time(model, pi_b)
    assert t_mix <= 10

    oracle, diagnostics = LpOracleService(), DiagnosticsService()
    opt_reward, _ = oracle.solve_cmdp(model)
    mu = stationary_distribution(model, pi_b)
    psi = max(oracle.concentrability(model, mu, opt_reward), 1.0)
    phi = oracle.slater_margin(model)
    passed = 0
    for seed in range(5):
        config = default_schedule(ACCEPTANCE_EPSILON, 0.1, psi, phi, model.dims, T=150_000 * t_mix ** 2, seed=seed)
        config = config.with_overrides(N_e=20_000 * t_mix, varsigma=0.01)
        data = DatasetSampler().sample_async(model, pi_b, config.N_e + config.T, seed=300 + seed, burn_in=10 * t_mix)
        report = run_dpdl(model.dims, data, config, initial_dist=model.initial_dist)
        quality = diagnostics.policy_quality(model, report.policy, opt_reward)
        passed += quality["reward_gap"] <= 10 * ACCEPTANCE_EPSILON and quality["violation"] <= 10 * ACCEPTANCE_EPSILON
    assert passed >= 4
