import numpy as np
import pytest

from app.core.exceptions import InvalidArgumentError
from app.services.diagnostics import DiagnosticsService, importance_weights, j_kappa
from app.services.dpdl import default_schedule, run_dpdl
from app.services.lp_oracle import LpOracleService

from .conftest import OPT_REWARD, SLATER_MARGIN


@pytest.fixture
def report(two_state, sync_dataset):
    config = default_schedule(0.1, 0.1, 2.0, SLATER_MARGIN, two_state.dims, T=300).with_overrides(N_e=2_000, varsigma=0.01)
    return run_dpdl(two_state.dims, sync_dataset, config, checkpoint_count=3)


def test_importance_weights_require_positive_estimate(uniform_mu):
    assert np.allclose(importance_weights(uniform_mu, 2 * uniform_mu), 0.5)
    with pytest.raises(InvalidArgumentError):
        importance_weights(uniform_mu, np.zeros((2, 2)))


def test_j_kappa_at_optimal_occupancy_is_optimal_value(two_state, uniform_mu):
    _, nu_star = LpOracleService().solve_cmdp(two_state)
    value = j_kappa(two_state, uniform_mu, uniform_mu, nu_star.values, psi=2.0, phi=SLATER_MARGIN, kappa=0.0)
    assert value == pytest.approx(OPT_REWARD, abs=1e-6)


def test_j_kappa_penalizes_flow_violation(two_state, uniform_mu):
    _, nu_star = LpOracleService().solve_cmdp(two_state)
    inflated = j_kappa(two_state, uniform_mu, uniform_mu, 1.5 * nu_star.values, psi=2.0, phi=SLATER_MARGIN, kappa=0.0)
    assert inflated < OPT_REWARD


def test_duality_gap_of_dpdl_output_is_nonnegative(two_state, uniform_mu, report):
    c = report.config
    gap = DiagnosticsService().duality_gap(two_state, uniform_mu, report.mu_hat, report.x_bar, c.psi, c.phi, c.kappa)
    assert gap >= -1e-7


def test_policy_quality(two_state, leave_policy):
    quality = DiagnosticsService().policy_quality(two_state, leave_policy.probs, OPT_REWARD)
    assert quality["reward"] == pytest.approx(1.0)
    assert quality["reward_gap"] == pytest.approx(OPT_REWARD - 1.0)
    assert quality["violation"] == pytest.approx(0.5)


def test_checkpoint_monitor_fills_every_column(two_state, uniform_mu, sync_dataset, report):
    service = DiagnosticsService()
    monitor = service.checkpoint_monitor(two_state, uniform_mu, report.mu_hat, report.config, OPT_REWARD)
    row = monitor(10, report.x_bar, report.V_bar, report.lambda_bar)
    assert set(row) == {"gap_estimate", "reward_gap", "violation"}
    assert row["violation"] >= 0.0

    quiet = service.checkpoint_monitor(two_state, uniform_mu, report.mu_hat, report.config, None, duality_gap=False)
    assert quiet(10, report.x_bar, report.V_bar, report.lambda_bar) == {}


def test_diagnose_agrees_with_consistent_report(two_state, uniform_mu, report):
    service = DiagnosticsService()
    quality = service.policy_quality(two_state, report.policy, OPT_REWARD)
    stored = report.model_copy(update={"reward_gap": quality["reward_gap"], "violation": quality["violation"]})
    diagnostics = service.diagnose(two_state, uniform_mu, stored)
    assert not diagnostics.flagged
    assert diagnostics.opt_reward == pytest.approx(OPT_REWARD, abs=1e-8)
    assert diagnostics.gap_estimate == pytest.approx(diagnostics.restricted_value - diagnostics.j_kappa)


def test_diagnose_flags_stale_numbers(two_state, uniform_mu, report):
    stale = report.model_copy(update={"reward_gap": 5.0})
    diagnostics = DiagnosticsService().diagnose(two_state, uniform_mu, stale, duality_gap=False)
    assert "reward_gap" in diagnostics.disagreements
    assert diagnostics.gap_estimate is None


def test_diagnose_needs_ground_truth_mu(two_state, report):
    with pytest.raises(InvalidArgumentError):
        DiagnosticsService().diagnose(two_state, None, report)
