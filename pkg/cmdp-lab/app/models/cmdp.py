"""
CMDP Domain Types
=================

Tabular constrained MDP, stationary policies and occupancy measures.

Arrays are stored densely and made read-only on construction, so instances
can be shared between threads and worker processes without copying.
Layouts:

- ``transition``: shape (S, A, S), ``transition[s, a, s'] = P(s'|s,a)``
- ``reward``: shape (S, A)
- ``utilities``: shape (I, S, A)
- ``initial_dist``: shape (S,)
"""

from typing import Any, Dict

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.config import get_numeric_config


def _frozen_array(value: Any) -> np.ndarray:
    array = np.array(value, dtype=float)
    array.flags.writeable = False
    return array


class ModelDims(BaseModel):
    """Dimensions and discount of a CMDP: everything the learner may know."""

    model_config = ConfigDict(frozen=True)

    num_states: int = Field(..., ge=1, description="|S|")
    num_actions: int = Field(..., ge=1, description="|A|")
    num_constraints: int = Field(..., ge=0, description="I")
    discount: float = Field(..., gt=0.0, lt=1.0, description="Discount factor gamma")

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    @property
    def effective_sparsity(self) -> int:
        """N = min(|S||A|, |S| + I)."""
        return min(self.num_pairs, self.num_states + self.num_constraints)


class CmdpModel(BaseModel):
    """Tabular CMDP (S, A, P, r, u, gamma, rho0)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    discount: float = Field(..., gt=0.0, lt=1.0, description="Discount factor gamma")
    transition: np.ndarray = Field(..., description="P(s'|s,a), shape (S, A, S)")
    reward: np.ndarray = Field(..., description="r(s,a) in [-1, 1], shape (S, A)")
    utilities: np.ndarray = Field(..., description="u_i(s,a) in [-1, 1], shape (I, S, A)")
    initial_dist: np.ndarray = Field(..., description="rho0, shape (S,)")

    @model_validator(mode="before")
    @classmethod
    def _coerce_arrays(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for key in ("transition", "reward", "initial_dist"):
            if key in data:
                data[key] = _frozen_array(data[key])
        reward = data.get("reward")
        utilities = np.array(data.get("utilities", []), dtype=float)
        if utilities.size == 0 and isinstance(reward, np.ndarray) and reward.ndim == 2:
            utilities = np.zeros((0,) + reward.shape)
        data["utilities"] = _frozen_array(utilities)
        return data

    @model_validator(mode="after")
    def _check_invariants(self) -> "CmdpModel":
        tol = get_numeric_config()
        P, r, u, rho0 = self.transition, self.reward, self.utilities, self.initial_dist
        if P.ndim != 3 or P.shape[0] != P.shape[2] or P.shape[0] < 1 or P.shape[1] < 1:
            raise ValueError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A = P.shape[0], P.shape[1]
        if r.shape != (S, A):
            raise ValueError(f"reward must have shape ({S}, {A}), got {r.shape}")
        if u.ndim != 3 or u.shape[1:] != (S, A):
            raise ValueError(f"utilities must have shape (I, {S}, {A}), got {u.shape}")
        if rho0.shape != (S,):
            raise ValueError(f"initial_dist must have shape ({S},), got {rho0.shape}")
        for name, array in (("transition", P), ("reward", r), ("utilities", u), ("initial_dist", rho0)):
            if not np.all(np.isfinite(array)):
                raise ValueError(f"{name} contains non-finite entries")
        if np.any(P < 0.0):
            raise ValueError("transition has negative entries")
        row_error = np.max(np.abs(P.sum(axis=2) - 1.0))
        if row_error > tol.STOCHASTIC_TOL:
            raise ValueError(f"transition rows must sum to 1 (max error {row_error:.3e})")
        if np.any(rho0 < 0.0) or abs(rho0.sum() - 1.0) > tol.STOCHASTIC_TOL:
            raise ValueError("initial_dist must be a probability vector")
        if np.any(np.abs(r) > 1.0 + tol.BOUND_TOL):
            raise ValueError("reward entries must lie in [-1, 1]")
        if u.size and np.any(np.abs(u) > 1.0 + tol.BOUND_TOL):
            raise ValueError("utility entries must lie in [-1, 1]")
        return self

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_constraints(self) -> int:
        return self.utilities.shape[0]

    @property
    def dims(self) -> ModelDims:
        return ModelDims(
            num_states=self.num_states,
            num_actions=self.num_actions,
            num_constraints=self.num_constraints,
            discount=self.discount,
        )

    def to_json_dict(self) -> Dict[str, Any]:
        """Serialize to the model file format (row-major (s, a, s') nesting)."""
        return {
            "gamma": self.discount,
            "rho0": self.initial_dist.tolist(),
            "reward": self.reward.tolist(),
            "utilities": self.utilities.tolist(),
            "transition": self.transition.tolist(),
        }

    @classmethod
    def from_json_dict(cls, payload: Dict[str, Any]) -> "CmdpModel":
        """Build a validated model from the model file format."""
        return cls(
            discount=payload["gamma"],
            transition=payload["transition"],
            reward=payload["reward"],
            utilities=payload.get("utilities", []),
            initial_dist=payload["rho0"],
        )


class Policy(BaseModel):
    """Stationary stochastic policy pi(a|s), shape (S, A)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    probs: np.ndarray = Field(..., description="pi(a|s), rows sum to one")

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if isinstance(data, dict) and "probs" in data:
            data = dict(data, probs=_frozen_array(data["probs"]))
        return data

    @model_validator(mode="after")
    def _check_rows(self) -> "Policy":
        tol = get_numeric_config()
        if self.probs.ndim != 2:
            raise ValueError(f"policy must have shape (S, A), got {self.probs.shape}")
        if np.any(self.probs < 0.0) or not np.all(np.isfinite(self.probs)):
            raise ValueError("policy has negative or non-finite entries")
        row_error = np.max(np.abs(self.probs.sum(axis=1) - 1.0))
        if row_error > tol.STOCHASTIC_TOL:
            raise ValueError(f"policy rows must sum to 1 (max error {row_error:.3e})")
        return self

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(probs=np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions: Any, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs=probs)


class OccupancyMeasure(BaseModel):
    """Unnormalized discounted state-action visitation nu(s,a), shape (S, A)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray = Field(..., description="nu(s,a) >= 0 in discounted visit counts")

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if isinstance(data, dict) and "values" in data:
            data = dict(data, values=_frozen_array(data["values"]))
        return data

    @model_validator(mode="after")
    def _check_nonnegative(self) -> "OccupancyMeasure":
        if self.values.ndim != 2:
            raise ValueError(f"occupancy must have shape (S, A), got {self.values.shape}")
        if np.any(self.values < 0.0) or not np.all(np.isfinite(self.values)):
            raise ValueError("occupancy has negative or non-finite entries")
        return self

    @property
    def mass(self) -> float:
        return float(self.values.sum())


class FlowMatrix(BaseModel):
    """A[(s,a), s'] = 1{s'=s} - gamma P(s'|s,a), shape (S*A, S)."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    entries: np.ndarray

    def apply_transpose(self, nu: np.ndarray) -> np.ndarray:
        """A^T nu for nu flattened row-major over (s, a)."""
        return self.entries.T @ np.asarray(nu, dtype=float).reshape(-1)


class HardInstance(BaseModel):
    """A generated CMDP with its reference distribution and closed-form optimum."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    model: CmdpModel
    mu: np.ndarray = Field(..., description="Reference distribution over (s, a), shape (S, A)")
    optimal_policy: Policy = Field(..., description="Closed-form optimal (or unique safe) policy")
    optimal_value: float = Field(..., description="Closed-form J* of the optimal policy")
    family: str = Field(..., description="Generator family: hard or slater")
    params: Dict[str, Any] = Field(default_factory=dict, description="Generator parameters echoed for the sidecar")

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if isinstance(data, dict) and "mu" in data:
            data = dict(data, mu=_frozen_array(data["mu"]))
        return data

    @model_validator(mode="after")
    def _check_reference(self) -> "HardInstance":
        tol = get_numeric_config()
        expected = (self.model.num_states, self.model.num_actions)
        if self.mu.shape != expected or self.optimal_policy.probs.shape != expected:
            raise ValueError(f"mu and optimal_policy must have shape {expected}")
        if np.any(self.mu < 0.0) or abs(self.mu.sum() - 1.0) > tol.MASS_TOL:
            raise ValueError("mu must be a probability distribution over (s, a)")
        return self
