"""
Offline Dataset Types
=====================

Transition tuples and the columnar dataset container shared by the samplers,
the DPDL solver and the verifier.
"""

from enum import Enum
from typing import Any, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .cmdp import ModelDims

# s0 column marker for tuples whose initial-state draw happens at consumption time
NO_INITIAL_STATE = -1


class DatasetMode(str, Enum):
    """How the tuples were generated."""

    SYNCHRONOUS = "sync"
    ASYNCHRONOUS = "async"


class SampleTuple(NamedTuple):
    """One transition (s0, s, a, s', r, u)."""

    s0: int
    s: int
    a: int
    s_next: int
    r: float
    u: np.ndarray


class OfflineDataset(BaseModel):
    """
    Columnar offline dataset.

    ``reference`` holds the true (s, a) distribution for synchronous data and
    the behavior policy for asynchronous data; learners never read it.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dims: ModelDims
    mode: DatasetMode
    seed: int
    s0: np.ndarray = Field(..., description="Initial-state draws, -1 when drawn at consumption time")
    s: np.ndarray = Field(..., description="States")
    a: np.ndarray = Field(..., description="Actions")
    s_next: np.ndarray = Field(..., description="Successor states")
    r: np.ndarray = Field(..., description="Rewards r(s,a)")
    u: np.ndarray = Field(..., description="Utilities u(s,a), shape (n, I)")
    reference: Optional[np.ndarray] = Field(default=None, description="mu (sync) or behavior policy (async)")

    @model_validator(mode="before")
    @classmethod
    def _coerce(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data
        data = dict(data)
        for key in ("s0", "s", "a", "s_next"):
            column = np.asarray(data[key], dtype=np.int64).reshape(-1)
            column.flags.writeable = False
            data[key] = column
        r = np.asarray(data["r"], dtype=float).reshape(-1)
        r.flags.writeable = False
        data["r"] = r
        u = np.asarray(data["u"], dtype=float)
        if u.ndim != 2:
            u = u.reshape(r.size, -1) if u.size else np.zeros((r.size, 0))
        u.flags.writeable = False
        data["u"] = u
        if data.get("reference") is not None:
            reference = np.array(data["reference"], dtype=float)
            reference.flags.writeable = False
            data["reference"] = reference
        return data

    @model_validator(mode="after")
    def _check_columns(self) -> "OfflineDataset":
        n = self.r.size
        S, A, I = self.dims.num_states, self.dims.num_actions, self.dims.num_constraints
        for name in ("s0", "s", "a", "s_next"):
            if getattr(self, name).size != n:
                raise ValueError(f"column {name} has {getattr(self, name).size} rows, expected {n}")
        if self.u.shape != (n, I):
            raise ValueError(f"utility columns must have shape ({n}, {I}), got {self.u.shape}")
        if n:
            if self.s.min() < 0 or self.s.max() >= S or self.s_next.min() < 0 or self.s_next.max() >= S:
                raise ValueError("state index out of range")
            if self.a.min() < 0 or self.a.max() >= A:
                raise ValueError("action index out of range")
            if self.s0.min() < NO_INITIAL_STATE or self.s0.max() >= S:
                raise ValueError("initial-state index out of range")
        if self.mode is DatasetMode.ASYNCHRONOUS and n > 1 and np.any(self.s_next[:-1] != self.s[1:]):
            raise ValueError("asynchronous tuples must chain: s_next[t] == s[t+1]")
        return self

    def __len__(self) -> int:
        return int(self.r.size)

    def tuple_at(self, index: int) -> SampleTuple:
        return SampleTuple(
            s0=int(self.s0[index]),
            s=int(self.s[index]),
            a=int(self.a[index]),
            s_next=int(self.s_next[index]),
            r=float(self.r[index]),
            u=self.u[index],
        )

    def slice(self, start: int, stop: int) -> "OfflineDataset":
        """Rows [start, stop) as a new dataset with the same provenance."""
        return OfflineDataset(
            dims=self.dims,
            mode=self.mode,
            seed=self.seed,
            s0=self.s0[start:stop],
            s=self.s[start:stop],
            a=self.a[start:stop],
            s_next=self.s_next[start:stop],
            r=self.r[start:stop],
            u=self.u[start:stop],
            reference=self.reference,
        )
