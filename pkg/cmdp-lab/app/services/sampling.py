"""
Dataset Sampler
===============

Synchronous (i.i.d. from mu) and asynchronous (single behavior trajectory)
offline dataset generation, plus the cursor that hands disjoint slices of a
dataset to the solver, the verifier and the adaptive driver.
"""

import bisect
from typing import Optional

import numpy as np

from ..core.exceptions import DataExhaustedError, PreconditionError
from ..core.rng import RngStream, make_rng
from ..models.cmdp import CmdpModel, Policy
from ..models.dataset import NO_INITIAL_STATE, DatasetMode, OfflineDataset
from .base import BaseService
from .markov import is_irreducible, is_primitive
from .cmdp_algebra import policy_transition

# Rows drawn per vectorized block; fixed so datasets do not depend on memory limits.
SYNC_CHUNK = 65_536


def last_supported(probs: np.ndarray) -> np.ndarray:
    """Index of the last positive entry along the final axis."""
    probs = np.asarray(probs, dtype=float)
    return probs.shape[-1] - 1 - np.argmax(probs[..., ::-1] > 0.0, axis=-1)


def inverse_cdf(probs: np.ndarray, draws: np.ndarray) -> np.ndarray:
    """
    Row-wise inverse-CDF sampling for uniform draws in [0, 1).

    A draw past the last cumulative sum (float round-off) lands on the last
    index with positive probability, never on a trailing zero entry.
    """
    probs = np.asarray(probs, dtype=float)
    index = (np.asarray(draws)[:, None] >= np.cumsum(probs, axis=1)).sum(axis=1)
    return np.minimum(index, last_supported(probs))


class DatasetSampler(BaseService):
    """Offline dataset generator for a known CMDP."""

    module = "dataset"

    def _check_distribution(self, model: CmdpModel, mu: np.ndarray) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        self.require(mu.size == model.num_states * model.num_actions, f"mu must have {model.num_states * model.num_actions} entries")
        mu = mu.reshape(-1)
        self.require(bool(np.all(np.isfinite(mu))) and bool(np.all(mu >= 0.0)), "mu must be nonnegative")
        self.require(abs(mu.sum() - 1.0) <= self.numeric.MASS_TOL, f"mu must sum to 1 (sum {mu.sum():.12f})")
        return mu / mu.sum()

    def sample_sync(self, model: CmdpModel, mu: np.ndarray, n: int, seed: int) -> OfflineDataset:
        """
        Draw n i.i.d. tuples (s0, s, a, s', r, u) with (s, a) ~ mu and s0 ~ rho0.

        Args:
            model: CMDP to simulate
            mu: Reference distribution over (s, a), shape (S, A) or (S*A,)
            n: Number of tuples
            seed: Dataset seed

        Returns:
            Synchronous OfflineDataset
        """
        self.require(n >= 1, f"n must be at least 1, got {n}")
        mu = self._check_distribution(model, mu)
        S, A = model.num_states, model.num_actions
        rng = make_rng(seed, RngStream.DATASET)
        rows = model.transition.reshape(S * A, S)

        s0, pairs, s_next = [], [], []
        for start in range(0, n, SYNC_CHUNK):
            size = min(SYNC_CHUNK, n - start)
            block_pairs = rng.choice(S * A, size=size, p=mu)
            draws = rng.random(size)
            pairs.append(block_pairs)
            s_next.append(inverse_cdf(rows[block_pairs], draws))
            s0.append(rng.choice(S, size=size, p=model.initial_dist))
        pairs_all = np.concatenate(pairs)
        s, a = np.divmod(pairs_all, A)
        dataset = OfflineDataset(
            dims=model.dims,
            mode=DatasetMode.SYNCHRONOUS,
            seed=seed,
            s0=np.concatenate(s0),
            s=s,
            a=a,
            s_next=np.concatenate(s_next),
            r=model.reward[s, a],
            u=model.utilities[:, s, a].T,
            reference=mu.reshape(S, A),
        )
        self.logger.info("Synchronous dataset sampled", n=n, seed=seed)
        return dataset

    def sample_async(
        self,
        model: CmdpModel,
        pi_b: Policy,
        n: int,
        seed: int,
        burn_in: int = 0,
        start_state: Optional[int] = None,
    ) -> OfflineDataset:
        """
        Roll out one trajectory of the behavior policy and keep the n steps after burn-in.

        Initial-state draws are left to the consumer (s0 column = -1).

        Raises:
            PreconditionError: the behavior chain is reducible or periodic
        """
        self.require(n >= 1, f"n must be at least 1, got {n}")
        self.require(burn_in >= 0, f"burn_in must be nonnegative, got {burn_in}")
        S, A = model.num_states, model.num_actions
        self.require(pi_b.probs.shape == (S, A), f"behavior policy must have shape ({S}, {A})")
        P_b = policy_transition(model, pi_b)
        if not is_irreducible(P_b):
            raise PreconditionError(self.module, "behavior chain is reducible")
        if not is_primitive(P_b):
            raise PreconditionError(self.module, "behavior chain is periodic")

        rng = make_rng(seed, RngStream.DATASET)
        if start_state is None:
            state = int(rng.choice(S, p=model.initial_dist))
        else:
            self.require(0 <= start_state < S, f"start state {start_state} out of range")
            state = int(start_state)

        policy_cdf = np.cumsum(pi_b.probs, axis=1).tolist()
        kernel_cdf = np.cumsum(model.transition, axis=2).tolist()
        last_action = last_supported(pi_b.probs).tolist()
        last_successor = last_supported(model.transition).tolist()
        total = burn_in + n
        action_draws = rng.random(total).tolist()
        state_draws = rng.random(total).tolist()

        s = np.empty(n, dtype=np.int64)
        a = np.empty(n, dtype=np.int64)
        s_next = np.empty(n, dtype=np.int64)
        for t in range(total):
            action = min(bisect.bisect_right(policy_cdf[state], action_draws[t]), last_action[state])
            successor = min(bisect.bisect_right(kernel_cdf[state][action], state_draws[t]), last_successor[state][action])
            if t >= burn_in:
                k = t - burn_in
                s[k], a[k], s_next[k] = state, action, successor
            state = successor

        dataset = OfflineDataset(
            dims=model.dims,
            mode=DatasetMode.ASYNCHRONOUS,
            seed=seed,
            s0=np.full(n, NO_INITIAL_STATE),
            s=s,
            a=a,
            s_next=s_next,
            r=model.reward[s, a],
            u=model.utilities[:, s, a].T,
            reference=pi_b.probs,
        )
        self.logger.info("Asynchronous dataset sampled", n=n, burn_in=burn_in, seed=seed)
        return dataset


class DatasetStream:
    """Cursor over a dataset handing out disjoint consecutive slices."""

    def __init__(self, dataset: OfflineDataset, module: str = "dataset"):
        self.dataset = dataset
        self.module = module
        self.cursor = 0

    @property
    def remaining(self) -> int:
        return len(self.dataset) - self.cursor

    def take(self, n: int, module: Optional[str] = None) -> OfflineDataset:
        """Next n unused tuples."""
        if n > self.remaining:
            raise DataExhaustedError(module or self.module, required=n, available=self.remaining)
        chunk = self.dataset.slice(self.cursor, self.cursor + n)
        self.cursor += n
        return chunk
