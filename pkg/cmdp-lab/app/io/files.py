"""
File Formats
============

Readers and writers for every artifact cmdp-lab exchanges on disk:

- model files: JSON ``{gamma, rho0, reward, utilities, transition}``
- instance sidecars: JSON with the true mu and the known optimum
- datasets: one header JSON line ``{mode, seed, n, num_states, num_actions,
  num_constraints, gamma, reference}`` followed by CSV rows
  ``s0,s,a,s_next,r,u_1..u_I`` (``s0 = -1`` in asynchronous files)
- reports, traces and diagnostics: JSON dumps of the pydantic records
- checkpoint curves and sweep summaries: CSV

Validation failures are re-raised as module-qualified InvalidArgumentError.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Type, TypeVar, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from ..core.exceptions import InvalidArgumentError
from ..models.cmdp import CmdpModel, HardInstance, ModelDims
from ..models.dataset import DatasetMode, OfflineDataset
from ..models.requests import ExperimentConfig
from ..models.responses import Checkpoint, InstanceSidecar

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)

CHECKPOINT_COLUMNS = ["t", "gap_estimate", "reward_gap", "violation", "eta", "wall_ms"]
FLOAT_FORMAT = "%.17g"


def write_json(path: PathLike, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: PathLike, module: str) -> Any:
    path = Path(path)
    if not path.is_file():
        raise InvalidArgumentError(module, f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(module, f"{path} is not valid JSON: {e}") from e


def write_record(path: PathLike, record: BaseModel) -> Path:
    """Dump a pydantic record; non-finite floats are written as Infinity/NaN."""
    return write_json(path, record.model_dump())


def read_record(path: PathLike, record_type: Type[ModelT], module: str) -> ModelT:
    payload = read_json(path, module)
    try:
        return record_type.model_validate(payload)
    except ValidationError as e:
        raise InvalidArgumentError(module, f"{path} failed validation: {e}") from e


def write_model(path: PathLike, model: CmdpModel) -> Path:
    return write_json(path, model.to_json_dict())


def read_model(path: PathLike) -> CmdpModel:
    """Load and validate a model file."""
    payload = read_json(path, "cmdp-core")
    try:
        return CmdpModel.from_json_dict(payload)
    except KeyError as e:
        raise InvalidArgumentError("cmdp-core", f"{path} is missing field {e}") from e
    except ValidationError as e:
        raise InvalidArgumentError("cmdp-core", f"{path} failed validation: {e}") from e


def sidecar_of(instance: HardInstance) -> InstanceSidecar:
    return InstanceSidecar(
        family=instance.family,
        params=instance.params,
        mu=instance.mu,
        optimal_policy=instance.optimal_policy.probs,
        optimal_value=instance.optimal_value,
    )


def write_sidecar(path: PathLike, sidecar: InstanceSidecar) -> Path:
    return write_record(path, sidecar)


def read_sidecar(path: PathLike) -> InstanceSidecar:
    return read_record(path, InstanceSidecar, "instances")


def write_dataset(path: PathLike, dataset: OfflineDataset) -> Path:
    """Header JSON line plus CSV rows; floats keep 17 significant digits for exact replay."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dims = dataset.dims
    header: Dict[str, Any] = {
        "mode": dataset.mode.value,
        "seed": dataset.seed,
        "n": len(dataset),
        "num_states": dims.num_states,
        "num_actions": dims.num_actions,
        "num_constraints": dims.num_constraints,
        "gamma": dims.discount,
        "reference": dataset.reference.tolist() if dataset.reference is not None else None,
    }
    frame = pd.DataFrame({"s0": dataset.s0, "s": dataset.s, "a": dataset.a, "s_next": dataset.s_next, "r": dataset.r})
    for i in range(dims.num_constraints):
        frame[f"u_{i + 1}"] = dataset.u[:, i]
    with path.open("w", encoding="utf-8", newline="") as handle:
        handle.write(json.dumps(header) + "\n")
        frame.to_csv(handle, index=False, float_format=FLOAT_FORMAT)
    return path


def read_dataset(path: PathLike) -> OfflineDataset:
    """Inverse of ``write_dataset``."""
    path = Path(path)
    if not path.is_file():
        raise InvalidArgumentError("dataset", f"file not found: {path}")
    with path.open("r", encoding="utf-8") as handle:
        try:
            header = json.loads(handle.readline())
        except json.JSONDecodeError as e:
            raise InvalidArgumentError("dataset", f"{path} has no valid header line: {e}") from e
        frame = pd.read_csv(handle)
    try:
        dims = ModelDims(
            num_states=header["num_states"],
            num_actions=header["num_actions"],
            num_constraints=header["num_constraints"],
            discount=header["gamma"],
        )
        utility_columns = [f"u_{i + 1}" for i in range(dims.num_constraints)]
        missing = [c for c in ["s0", "s", "a", "s_next", "r"] + utility_columns if c not in frame.columns]
        if missing:
            raise InvalidArgumentError("dataset", f"{path} is missing columns {missing}")
        if len(frame) != header["n"]:
            raise InvalidArgumentError("dataset", f"{path} header announces {header['n']} rows, found {len(frame)}")
        return OfflineDataset(
            dims=dims,
            mode=DatasetMode(header["mode"]),
            seed=header["seed"],
            s0=frame["s0"].to_numpy(),
            s=frame["s"].to_numpy(),
            a=frame["a"].to_numpy(),
            s_next=frame["s_next"].to_numpy(),
            r=frame["r"].to_numpy(dtype=float),
            u=frame[utility_columns].to_numpy(dtype=float) if utility_columns else np.zeros((len(frame), 0)),
            reference=header.get("reference"),
        )
    except KeyError as e:
        raise InvalidArgumentError("dataset", f"{path} header is missing field {e}") from e
    except ValidationError as e:
        raise InvalidArgumentError("dataset", f"{path} failed validation: {e}") from e


def write_checkpoints(path: PathLike, checkpoints: List[Checkpoint]) -> Path:
    """One row per checkpoint; empty diagnostics stay blank."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([c.model_dump() for c in checkpoints], columns=CHECKPOINT_COLUMNS)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def read_checkpoints(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


def read_experiment_config(path: PathLike) -> ExperimentConfig:
    return read_record(path, ExperimentConfig, "experiment-cli")
