import numpy as np
import pytest
from numpy.testing import assert_allclose
from pydantic import ValidationError

from app.core.exceptions import InvalidArgumentError
from app.models.cmdp import Policy
from app.models.requests import HardInstanceParams, RandomInstanceParams
from app.services.cmdp_algebra import evaluate, state_occupancy
from app.services.instances import (
    InstanceService,
    block_constants,
    block_masses,
    build_hard_cmdp,
    build_slater_instance,
    closed_form_state_occupancy,
    closed_form_value,
    random_cmdp,
    random_hard_params,
    random_slater_params,
    slater_constraint_value,
)
from app.services.lp_oracle import LpOracleService


@pytest.fixture
def hard_params():
    return random_hard_params(S=4, A=3, I=8, C=4.0, gamma=0.8, seed=1)


@pytest.fixture
def slater_params():
    return random_slater_params(S=4, A=3, C=3.0, gamma=0.8, seed=2)


def test_block_constants():
    c = block_constants(0.8)
    assert c.p == pytest.approx(1 / 1.2)
    assert c.q == pytest.approx(0.75)
    # one block carries total mass 1/(1-gamma) per unit of rho
    assert c.v0 + c.v1 * (1 - 0.8) + c.v == pytest.approx(1.0)


def test_hard_params_block_counts(hard_params):
    assert hard_params.K == 1
    assert hard_params.S_c == 4
    assert hard_params.S_u == 0
    assert block_masses(hard_params) == (0.25, 0.0)
    counts = HardInstanceParams.block_counts(S=10, A=5, I=8)
    assert counts == {"K": 2, "S_c": 2, "S_u": 8}


def test_hard_params_validate_sign_lengths():
    with pytest.raises(ValidationError):
        HardInstanceParams(S=4, A=3, I=8, C=4.0, gamma=0.8, theta_c=[1, -1], theta_u=[])
    with pytest.raises(ValidationError):
        HardInstanceParams(S=4, A=3, I=8, C=4.0, gamma=0.8, theta_c=[1, 0, 1, 1], theta_u=[])


def test_hard_instance_layout(hard_params):
    instance = build_hard_cmdp(hard_params)
    model = instance.model
    assert model.num_states == 17
    assert model.num_actions == 3
    assert model.num_constraints == 8
    assert instance.family == "hard"
    assert instance.mu.sum() == pytest.approx(1.0)
    assert np.all(instance.mu >= 0.0)


def test_hard_instance_optimum_matches_closed_form(hard_params):
    instance = build_hard_cmdp(hard_params)
    value, _ = LpOracleService().solve_cmdp(instance.model)
    assert value == pytest.approx(closed_form_value(hard_params), abs=1e-8)
    assert instance.optimal_value == pytest.approx(value, abs=1e-8)

    reward, utilities = evaluate(instance.model, instance.optimal_policy)
    assert reward == pytest.approx(value, abs=1e-9)
    assert utilities.min() >= -1e-9


def test_hard_instance_state_occupancy_matches_closed_form(hard_params):
    instance = build_hard_cmdp(hard_params)
    for policy in (instance.optimal_policy, Policy.uniform(17, 3)):
        assert_allclose(
            state_occupancy(instance.model, policy), closed_form_state_occupancy(hard_params, policy), atol=1e-10
        )


def test_hard_instance_concentrability_is_bounded_by_C(hard_params):
    instance = build_hard_cmdp(hard_params)
    c_star = LpOracleService().concentrability(instance.model, instance.mu)
    assert 1.0 - 1e-9 <= c_star <= hard_params.C + 1e-6


def test_hard_instance_with_unconstrained_blocks():
    params = random_hard_params(S=8, A=3, I=8, C=2.0, gamma=0.5, seed=7)
    assert params.S_c == 4 and params.S_u == 4
    instance = build_hard_cmdp(params)
    assert instance.model.num_states == 33
    value, _ = LpOracleService().solve_cmdp(instance.model)
    assert value == pytest.approx(closed_form_value(params), abs=1e-8)


def test_slater_instance_has_zero_margin(slater_params):
    instance = build_slater_instance(slater_params)
    assert instance.family == "slater"
    assert instance.model.num_states == 8
    assert abs(LpOracleService().slater_margin(instance.model)) <= 1e-8
    _, utilities = evaluate(instance.model, instance.optimal_policy)
    assert utilities[0] == pytest.approx(0.0, abs=1e-10)
    assert slater_constraint_value(slater_params, instance.optimal_policy) == 0.0


def test_slater_constraint_value_matches_evaluation(slater_params):
    instance = build_slater_instance(slater_params)
    policy = Policy.uniform(instance.model.num_states, 3)
    _, utilities = evaluate(instance.model, policy)
    assert slater_constraint_value(slater_params, policy) == pytest.approx(utilities[0], abs=1e-10)
    assert utilities[0] < 0.0


def test_random_cmdp_meets_slater_target():
    model = random_cmdp(S=5, A=3, I=2, gamma=0.9, slater_target=0.2, seed=4)
    assert LpOracleService().slater_margin(model) >= 0.2 - 1e-8
    again = random_cmdp(S=5, A=3, I=2, gamma=0.9, slater_target=0.2, seed=4)
    assert_allclose(model.transition, again.transition)
    assert_allclose(model.utilities, again.utilities)


def test_random_cmdp_without_constraints():
    model = InstanceService().random_cmdp(RandomInstanceParams(S=3, A=2, gamma=0.7, seed=1))
    assert model.num_constraints == 0


def test_mixture_reference_is_a_distribution_with_finite_concentrability():
    model = random_cmdp(S=4, A=2, I=1, gamma=0.8, seed=3)
    service = InstanceService()
    mu = service.mixture_reference(model, 0.5)
    assert mu.sum() == pytest.approx(1.0)
    assert np.all(mu > 0.0)
    # the mixed-in optimal occupancy alone bounds C* by 1/weight
    assert LpOracleService().concentrability(model, mu) <= 2.0 + 1e-6
    with pytest.raises(InvalidArgumentError):
        service.mixture_reference(model, 1.5)
