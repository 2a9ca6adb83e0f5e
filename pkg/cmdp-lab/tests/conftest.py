"""
Shared fixtures
===============

``two_state`` is small enough to solve by hand: the action picks the next
state, reward is earned in state 1 and the single constraint
0.5 nu(0) - nu(1) >= 0 caps nu(1) at 2/3 with gamma = 0.5.
"""

import os
from typing import NamedTuple

import numpy as np
import pytest

from app.models.cmdp import CmdpModel, Policy
from app.services.instances import InstanceService, random_cmdp
from app.services.lp_oracle import LpOracleService
from app.services.sampling import DatasetSampler

GAMMA = 0.5
OPT_REWARD = 2.0 / 3.0
SLATER_MARGIN = 0.5


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CMDP_LAB_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set CMDP_LAB_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def make_two_state() -> CmdpModel:
    transition = np.zeros((2, 2, 2))
    for s in range(2):
        for a in range(2):
            transition[s, a, a] = 1.0
    return CmdpModel(
        discount=GAMMA,
        transition=transition,
        reward=[[0.0, 0.0], [1.0, 1.0]],
        utilities=[[[0.5, 0.5], [-1.0, -1.0]]],
        initial_dist=[1.0, 0.0],
    )


@pytest.fixture
def two_state() -> CmdpModel:
    return make_two_state()


@pytest.fixture
def uniform_mu() -> np.ndarray:
    return np.full((2, 2), 0.25)


@pytest.fixture
def stay_policy() -> Policy:
    """Always action 0: never leaves state 0."""
    return Policy.deterministic([0, 0], 2)


@pytest.fixture
def leave_policy() -> Policy:
    """Always action 1: moves to state 1 and stays."""
    return Policy.deterministic([1, 1], 2)


@pytest.fixture
def sync_dataset(two_state, uniform_mu):
    return DatasetSampler().sample_sync(two_state, uniform_mu, 20_000, seed=11)


class AcceptanceInstance(NamedTuple):
    model: CmdpModel
    mu: np.ndarray
    opt_reward: float
    concentrability: float
    slater_margin: float


@pytest.fixture(scope="session")
def acceptance() -> AcceptanceInstance:
    """Random 6-state CMDP with two constraints and a half-optimal, half-uniform reference."""
    model = random_cmdp(6, 3, 2, 0.9, seed=0)
    oracle = LpOracleService()
    opt_reward, nu_star = oracle.solve_cmdp(model)
    mu = InstanceService(oracle=oracle).mixture_reference(model, 0.5, nu_star.values)
    return AcceptanceInstance(
        model=model,
        mu=mu,
        opt_reward=opt_reward,
        concentrability=oracle.concentrability(model, mu, opt_reward),
        slater_margin=oracle.slater_margin(model),
    )
