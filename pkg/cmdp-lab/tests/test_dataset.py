import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.core.exceptions import DataExhaustedError, InvalidArgumentError, PreconditionError
from app.models.cmdp import Policy
from app.models.dataset import NO_INITIAL_STATE, DatasetMode
from app.services.markov import (
    chain_mixing_time,
    chain_stationary,
    is_aperiodic,
    is_irreducible,
    is_primitive,
    mixing_time,
    stationary_distribution,
)
from app.services.sampling import DatasetSampler, DatasetStream, inverse_cdf, last_supported


def test_sync_dataset_columns_follow_the_model(two_state, sync_dataset):
    assert len(sync_dataset) == 20_000
    assert sync_dataset.mode is DatasetMode.SYNCHRONOUS
    assert_array_equal(sync_dataset.r, two_state.reward[sync_dataset.s, sync_dataset.a])
    assert_array_equal(sync_dataset.u[:, 0], two_state.utilities[0, sync_dataset.s, sync_dataset.a])
    # the action picks the successor deterministically
    assert_array_equal(sync_dataset.s_next, sync_dataset.a)
    assert np.all(sync_dataset.s0 == 0)
    row = sync_dataset.tuple_at(7)
    assert row.s_next == row.a
    assert row.r == two_state.reward[row.s, row.a]


def test_sync_dataset_frequencies_match_mu(two_state):
    mu = np.array([[0.1, 0.2], [0.3, 0.4]])
    data = DatasetSampler().sample_sync(two_state, mu, 50_000, seed=3)
    counts = np.bincount(data.s * 2 + data.a, minlength=4) / len(data)
    assert_allclose(counts, mu.reshape(-1), atol=0.01)


def test_sampling_is_reproducible_per_seed(two_state, uniform_mu):
    sampler = DatasetSampler()
    first = sampler.sample_sync(two_state, uniform_mu, 500, seed=5)
    second = sampler.sample_sync(two_state, uniform_mu, 500, seed=5)
    other = sampler.sample_sync(two_state, uniform_mu, 500, seed=6)
    assert_array_equal(first.s, second.s)
    assert_array_equal(first.a, second.a)
    assert not np.array_equal(first.a, other.a)


def test_sync_sampling_rejects_bad_mu(two_state):
    with pytest.raises(InvalidArgumentError):
        DatasetSampler().sample_sync(two_state, np.full((2, 2), 0.5), 10, seed=0)


def test_async_dataset_is_one_trajectory(two_state):
    data = DatasetSampler().sample_async(two_state, Policy.uniform(2, 2), 1_000, seed=2, burn_in=10)
    assert data.mode is DatasetMode.ASYNCHRONOUS
    assert_array_equal(data.s_next[:-1], data.s[1:])
    assert np.all(data.s0 == NO_INITIAL_STATE)


def test_async_sampling_rejects_reducible_behavior(two_state):
    # action = current state keeps the chain where it started
    with pytest.raises(PreconditionError):
        DatasetSampler().sample_async(two_state, Policy.deterministic([0, 1], 2), 100, seed=0)


def test_stream_hands_out_disjoint_slices(sync_dataset):
    stream = DatasetStream(sync_dataset)
    head = stream.take(100)
    tail = stream.take(50)
    assert_array_equal(head.s, sync_dataset.s[:100])
    assert_array_equal(tail.s, sync_dataset.s[100:150])
    assert stream.remaining == len(sync_dataset) - 150


def test_stream_raises_when_exhausted(sync_dataset):
    stream = DatasetStream(sync_dataset.slice(0, 10))
    stream.take(8)
    with pytest.raises(DataExhaustedError) as excinfo:
        stream.take(5, "dpdl")
    assert excinfo.value.required == 5
    assert excinfo.value.available == 2
    assert str(excinfo.value).startswith("dpdl:")


def test_chain_stationary_two_state():
    P = np.array([[0.9, 0.1], [0.5, 0.5]])
    assert_allclose(chain_stationary(P), [5.0 / 6.0, 1.0 / 6.0])


def test_periodic_chain_is_irreducible_but_not_primitive():
    flip = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert is_irreducible(flip)
    assert not is_primitive(flip)
    assert not is_aperiodic(flip)
    with pytest.raises(PreconditionError):
        chain_mixing_time(flip)


def test_mixing_time_of_fast_chain():
    P = np.full((3, 3), 1.0 / 3.0)
    t_mix, curve = chain_mixing_time(P)
    assert t_mix == 1
    assert curve.shape == (4,)
    assert_allclose(curve, 0.0, atol=1e-12)


def test_stationary_distribution_of_behavior_policy(two_state):
    mu = stationary_distribution(two_state, Policy(probs=[[0.75, 0.25], [0.5, 0.5]]))
    # state chain [[0.75, 0.25], [0.5, 0.5]] has stationary (2/3, 1/3)
    assert_allclose(mu, [[0.5, 1.0 / 6.0], [1.0 / 6.0, 1.0 / 6.0]])
    t_mix, _ = mixing_time(two_state, Policy.uniform(2, 2))
    assert t_mix == 1


def test_inverse_cdf_never_lands_on_trailing_zero_probability():
    # ten 0.1 entries sum to 0.9999999999999999, so a draw of 1 - 2**-53 overshoots the cdf
    probs = np.array([[0.1] * 10 + [0.0], [0.5, 0.5] + [0.0] * 9])
    assert_array_equal(last_supported(probs), [9, 1])
    draws = np.array([1.0 - 2.0**-53, 1.0 - 2.0**-53])
    assert_array_equal(inverse_cdf(probs, draws), [9, 1])
    assert_array_equal(inverse_cdf(probs, np.array([0.05, 0.6])), [0, 1])


def test_sync_successors_stay_in_the_kernel_support(two_state, uniform_mu):
    data = DatasetSampler().sample_sync(two_state, uniform_mu, 5_000, seed=2)
    assert np.all(two_state.transition[data.s, data.a, data.s_next] > 0.0)
