import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import DataExhaustedError, InvalidArgumentError, RoundCapExceededError
from app.models.cmdp import Policy
from app.models.requests import VerifyThresholds
from app.models.responses import AdaptiveTrace
from app.services.cmdp_algebra import evaluate, flow_residual, occupancy_of_policy
from app.services.lp_oracle import LpOracleService
from app.services.sampling import DatasetSampler
from app.services.verify import AdaptiveDpdl, Verifier, adaptive_dpdl, required_verify_samples, verify

from .conftest import SLATER_MARGIN

LOOSE = VerifyThresholds(flow_factor=1e9, utility_factor=1e9, exit_constant=1e9)


@pytest.fixture
def large_dataset(two_state, uniform_mu):
    return DatasetSampler().sample_sync(two_state, uniform_mu, 200_000, seed=21)


def test_estimates_match_exact_values(two_state, uniform_mu, large_dataset):
    pi = Policy(probs=[[0.3, 0.7], [0.6, 0.4]])
    nu = occupancy_of_policy(two_state, pi).values
    reward, utilities = evaluate(two_state, pi)

    report = verify(nu, uniform_mu, two_state.dims, large_dataset, 0.1, 0.0, SLATER_MARGIN, two_state.initial_dist)
    assert report.N_v == 200_000
    assert report.J_hat == pytest.approx(reward, abs=0.05)
    assert_allclose(report.J_u_hat, utilities, atol=0.05)
    assert_allclose(report.Delta_p_hat, flow_residual(two_state, nu), atol=0.05)


def test_exact_safe_occupancy_passes(two_state, uniform_mu, large_dataset):
    nu = occupancy_of_policy(two_state, Policy.deterministic([0, 0], 2)).values
    report = Verifier().verify(nu, uniform_mu, two_state.dims, large_dataset, 0.1, 0.0, SLATER_MARGIN, two_state.initial_dist)
    assert report.flow_threshold == pytest.approx(1.5 * SLATER_MARGIN * 0.5 * 0.1)
    assert report.utility_threshold == pytest.approx(3.0 * SLATER_MARGIN * 0.1)
    assert report.passed
    assert report.decide() == report.passed


def test_inflated_occupancy_fails_the_flow_test(two_state, uniform_mu, large_dataset):
    nu = 2.0 * occupancy_of_policy(two_state, Policy.deterministic([0, 0], 2)).values
    report = Verifier().verify(nu, uniform_mu, two_state.dims, large_dataset, 0.1, 0.0, SLATER_MARGIN, two_state.initial_dist)
    assert np.abs(report.Delta_p_hat).sum() == pytest.approx(1.0, abs=0.05)
    assert not report.passed


def test_verify_uses_only_the_first_N_v_tuples(two_state, uniform_mu, large_dataset):
    nu = occupancy_of_policy(two_state, Policy.uniform(2, 2)).values
    report = verify(nu, uniform_mu, two_state.dims, large_dataset, 0.1, 0.0, SLATER_MARGIN, two_state.initial_dist, N_v=1_000)
    assert report.N_v == 1_000
    with pytest.raises(DataExhaustedError):
        verify(nu, uniform_mu, two_state.dims, large_dataset.slice(0, 10), 0.1, 0.0, SLATER_MARGIN, two_state.initial_dist, N_v=50)


def test_required_verify_samples(two_state):
    dims = two_state.dims
    expected = math.ceil(
        64 * 2 * 3.0 * 4 * math.log(40 * 2 * 1 / 0.1) / (SLATER_MARGIN ** 2 * 0.5 ** 4 * (0.1 / 10) ** 2)
    )
    assert required_verify_samples(dims, 3.0, SLATER_MARGIN, 0.1, 0.1) == expected


def _driver(two_state, **kwargs):
    options = dict(T=50, N_e=100, N_v=100, varsigma=0.01, seed=2)
    options.update(kwargs)
    return AdaptiveDpdl(two_state.dims, two_state.initial_dist, **options)


def test_adaptive_exits_after_two_verified_rounds(two_state, sync_dataset):
    driver = _driver(two_state, thresholds=LOOSE)
    policy, trace = driver.run(sync_dataset, 0.1, 0.1, SLATER_MARGIN)
    assert [r.exit_reason for r in trace.rounds] == ["no previous verified round", "exit"]
    assert trace.psi_values == [1.0, 2.0]
    assert [r.T for r in trace.rounds] == [50, 100]
    assert trace.rounds[1].delta == pytest.approx(6 * 0.1 / (math.pi ** 2 * 4))
    assert trace.rounds[0].epsilon == pytest.approx(0.1 / 15)
    assert policy.shape == (2, 2)
    assert driver.final_report is not None
    assert driver.final_report.config.psi == 2.0
    assert trace.exit_reason is not None


def test_adaptive_without_budget_scaling_keeps_T(two_state, sync_dataset):
    _, trace = _driver(two_state, thresholds=LOOSE, scale_budget=False).run(sync_dataset, 0.1, 0.1, SLATER_MARGIN)
    assert [r.T for r in trace.rounds] == [50, 50]


def test_adaptive_out_of_data_keeps_partial_trace(two_state, sync_dataset):
    # round 1 needs 250 tuples, round 2 needs 300
    with pytest.raises(DataExhaustedError) as excinfo:
        _driver(two_state, thresholds=LOOSE).run(sync_dataset.slice(0, 350), 0.1, 0.1, SLATER_MARGIN)
    partial = excinfo.value.partial
    assert isinstance(partial, AdaptiveTrace)
    assert len(partial.rounds) == 1
    assert str(excinfo.value).startswith("verify-adaptive:")


def test_adaptive_round_cap(two_state, sync_dataset):
    with pytest.raises(RoundCapExceededError) as excinfo:
        _driver(two_state, thresholds=LOOSE, round_cap=1).run(sync_dataset, 0.1, 0.1, SLATER_MARGIN)
    assert excinfo.value.rounds == 1
    assert len(excinfo.value.partial.rounds) == 1


def test_adaptive_rejects_psi_init_below_one(two_state, sync_dataset):
    with pytest.raises(InvalidArgumentError):
        adaptive_dpdl(two_state.dims, sync_dataset, 0.1, 0.1, SLATER_MARGIN, 0.5, two_state.initial_dist, T=10, N_e=10)


@pytest.mark.slow
def test_adaptive_with_default_thresholds_stops_within_four_times_concentrability(two_state, uniform_mu):
    concentrability = LpOracleService().concentrability(two_state, uniform_mu)
    # per-round accuracy eps/15 sits at the top of the schedule's range for gamma = 0.5
    epsilon = 15 * 0.2
    successes = 0
    for seed in range(5):
        data = DatasetSampler().sample_sync(two_state, uniform_mu, 2_100_000, seed=40 + seed)
        driver = AdaptiveDpdl(
            two_state.dims,
            two_state.initial_dist,
            round_cap=4,
            T=300_000,
            N_e=20_000,
            N_v=200_000,
            varsigma=0.01,
            scale_budget=False,
            seed=seed,
        )
        try:
            policy, trace = driver.run(data, epsilon, 0.1, SLATER_MARGIN)
        except (DataExhaustedError, RoundCapExceededError):
            continue
        _, utilities = evaluate(two_state, Policy(probs=policy))
        last = trace.rounds[-1].verify
        successes += trace.psi_values[-1] <= 4 * concentrability and utilities.min() >= -last.utility_threshold
    assert successes >= 4
