"""
CLI Commands
============

Sub-command handlers for ``gen``, ``sample``, ``run``, ``diagnose`` and
``sweep``, plus the experiment runner they share. Handlers return a process
exit code; cmdp-lab errors are mapped to their ``exit_code`` by ``main``.
"""

import argparse
import json
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import ValidationError

from ..core.config import get_settings
from ..core.exceptions import CmdpLabError, DataExhaustedError, InvalidArgumentError, PreconditionError, RoundCapExceededError
from ..core.logging import get_logger
from ..io.files import (
    read_dataset,
    read_experiment_config,
    read_model,
    read_record,
    read_sidecar,
    sidecar_of,
    write_checkpoints,
    write_dataset,
    write_json,
    write_model,
    write_record,
    write_sidecar,
)
from ..models.cmdp import CmdpModel, Policy
from ..models.dataset import DatasetMode, OfflineDataset
from ..models.requests import ExperimentConfig, HardInstanceParams, RandomInstanceParams, SlaterInstanceParams
from ..models.responses import AdaptiveTrace, InstanceSidecar, SolveReport
from ..services.base import BaseService
from ..services.cmdp_algebra import policy_of_occupancy
from ..services.diagnostics import DiagnosticsService
from ..services.dpdl import DpdlSolver, default_schedule, estimate_reference
from ..services.instances import InstanceService, random_hard_params, random_slater_params
from ..services.lp_oracle import LpOracleService
from ..services.markov import stationary_distribution
from ..services.sampling import DatasetSampler
from ..services.verify import AdaptiveDpdl

MODULE = "experiment-cli"
logger = get_logger(__name__)


def _sidecar_path(model_path: Path) -> Path:
    return model_path.with_name(model_path.stem + ".sidecar.json")


def _parse_seeds(text: str) -> List[int]:
    match = re.fullmatch(r"\s*(\d+)\s*\.\.\s*(\d+)\s*", text)
    if not match or int(match.group(1)) > int(match.group(2)):
        raise InvalidArgumentError(MODULE, f"--seeds expects 'a..b' with a <= b, got {text!r}")
    return list(range(int(match.group(1)), int(match.group(2)) + 1))


def generate_instance(
    generator: str, params: Dict[str, Any], mixture_weight: float = 0.5, oracle: Optional[LpOracleService] = None
) -> Tuple[CmdpModel, InstanceSidecar]:
    """Build a model and its sidecar from a generator name and raw parameters."""
    instances = InstanceService(oracle=oracle)
    try:
        if generator == "random":
            model = instances.random_cmdp(RandomInstanceParams(**params))
            opt_reward, nu_star = instances.oracle.solve_cmdp(model)
            sidecar = InstanceSidecar(
                family="random",
                params=params,
                mu=instances.mixture_reference(model, mixture_weight, nu_star.values),
                optimal_policy=policy_of_occupancy(nu_star).probs,
                optimal_value=opt_reward,
            )
            return model, sidecar
        if generator == "hard":
            hard = HardInstanceParams(**params) if "theta_c" in params else random_hard_params(**params)
            instance = instances.build_hard_cmdp(hard)
        elif generator == "slater":
            slater = SlaterInstanceParams(**params) if "theta" in params else random_slater_params(**params)
            instance = instances.build_slater_instance(slater)
        else:
            raise InvalidArgumentError(MODULE, f"unknown generator {generator!r}")
    except (ValidationError, TypeError) as e:
        raise InvalidArgumentError("instances", f"invalid {generator} parameters: {e}") from e
    return instance.model, sidecar_of(instance)


def reference_distribution(
    model: CmdpModel, reference: str, sidecar: Optional[InstanceSidecar], weight: float, oracle: LpOracleService
) -> np.ndarray:
    """mu for synchronous sampling."""
    if reference == "sidecar":
        if sidecar is None:
            raise InvalidArgumentError(MODULE, "reference 'sidecar' needs a sidecar file")
        return sidecar.mu
    if reference == "uniform":
        return np.full((model.num_states, model.num_actions), 1.0 / (model.num_states * model.num_actions))
    return InstanceService(oracle=oracle).mixture_reference(model, weight)


def behavior_policy(
    model: CmdpModel, reference: str, sidecar: Optional[InstanceSidecar], weight: float, oracle: LpOracleService
) -> Policy:
    """Behavior policy for asynchronous sampling."""
    uniform = Policy.uniform(model.num_states, model.num_actions)
    if reference == "uniform":
        return uniform
    if reference == "sidecar":
        if sidecar is None:
            raise InvalidArgumentError(MODULE, "reference 'sidecar' needs a sidecar file")
        return policy_of_occupancy(sidecar.mu)
    if sidecar is not None and sidecar.optimal_policy is not None:
        optimal = sidecar.optimal_policy
    else:
        optimal = policy_of_occupancy(oracle.solve_cmdp(model)[1]).probs
    return Policy(probs=weight * optimal + (1.0 - weight) * uniform.probs)


@dataclass
class ExperimentResult:
    """Everything one run produced."""

    report: SolveReport
    trace: Optional[AdaptiveTrace]
    output_dir: Path
    concentrability: Optional[float]
    slater_margin: float

    def summary(self) -> Dict[str, Any]:
        return {
            "seed": self.report.seed,
            "iterations": self.report.iterations,
            "reward_gap": self.report.reward_gap,
            "violation": self.report.violation,
            "gap_estimate": self.report.gap_estimate,
            "psi": self.report.config.psi,
            "concentrability": self.concentrability,
            "rounds": len(self.trace.rounds) if self.trace else None,
            "wall_ms": self.report.wall_ms,
        }


class ExperimentRunner(BaseService):
    """Resolves instance, ground truth and dataset for one configuration and runs the solver."""

    module = MODULE

    def __init__(self, config: ExperimentConfig, **kwargs):
        super().__init__(**kwargs)
        self.config = config
        self.oracle = LpOracleService(settings=self.settings, numeric=self.numeric)
        self.sampler = DatasetSampler(settings=self.settings, numeric=self.numeric)
        self.diagnostics = DiagnosticsService(oracle=self.oracle, settings=self.settings, numeric=self.numeric)
        self.output_dir = Path(config.output_dir or self.settings.output_dir)

    def resolve_instance(self) -> Tuple[CmdpModel, Optional[InstanceSidecar]]:
        spec = self.config.instance
        if spec.generator is not None:
            return generate_instance(spec.generator, spec.params, self.config.dataset.mixture_weight, self.oracle)
        model = read_model(spec.model_path)
        sidecar = read_sidecar(spec.sidecar_path) if spec.sidecar_path else None
        return model, sidecar

    def true_reference(
        self, model: CmdpModel, sidecar: Optional[InstanceSidecar], dataset: Optional[OfflineDataset]
    ) -> Tuple[Optional[np.ndarray], Optional[Policy]]:
        """(mu, behavior policy); mu is the stationary distribution for asynchronous data."""
        spec = self.config.dataset
        if dataset is not None:
            if dataset.mode is DatasetMode.SYNCHRONOUS:
                mu = dataset.reference if dataset.reference is not None else (sidecar.mu if sidecar else None)
                return mu, None
            behavior = Policy(probs=dataset.reference) if dataset.reference is not None else None
            return (stationary_distribution(model, behavior) if behavior else None), behavior
        if spec.mode is DatasetMode.SYNCHRONOUS:
            return reference_distribution(model, spec.reference, sidecar, spec.mixture_weight, self.oracle), None
        behavior = behavior_policy(model, spec.reference, sidecar, spec.mixture_weight, self.oracle)
        return stationary_distribution(model, behavior), behavior

    def sample(self, model: CmdpModel, mu: Optional[np.ndarray], behavior: Optional[Policy], n: int) -> OfflineDataset:
        spec = self.config.dataset
        if spec.mode is DatasetMode.SYNCHRONOUS:
            return self.sampler.sample_sync(model, mu, n, spec.seed)
        return self.sampler.sample_async(model, behavior, n, spec.seed, burn_in=spec.burn_in)

    def run(self) -> ExperimentResult:
        cfg, solver = self.config, self.config.solver
        model, sidecar = self.resolve_instance()
        dims = model.dims
        dataset = read_dataset(cfg.dataset.path) if cfg.dataset.path else None
        mu, behavior = self.true_reference(model, sidecar, dataset)

        opt_reward, nu_star = self.oracle.solve_cmdp(model)
        concentrability = self.oracle.concentrability(model, mu, opt_reward) if mu is not None else None
        phi = solver.phi if solver.phi is not None else self.oracle.slater_margin(model)
        if phi <= self.numeric.LP_OPT_TOL:
            raise PreconditionError(self.module, f"Slater margin {phi:.3e} is not positive; pass phi explicitly")
        self.logger.info("Ground truth resolved", opt_reward=opt_reward, concentrability=concentrability, slater_margin=phi)

        diagnose = cfg.diagnostics.ground_truth and mu is not None
        trace: Optional[AdaptiveTrace] = None
        if solver.mode == "dpdl":
            psi = solver.psi
            if psi is None:
                if concentrability is None or not np.isfinite(concentrability):
                    raise PreconditionError(self.module, "C* is unknown or infinite; pass psi or use adaptive mode")
                psi = max(1.0, concentrability)
            schedule = default_schedule(solver.epsilon, solver.delta, psi, phi, dims, T=solver.T, seed=cfg.seed)
            schedule = schedule.with_overrides(N_e=solver.N_e, varsigma=solver.varsigma, eta=solver.eta)
            if dataset is None:
                dataset = self.sample(model, mu, behavior, cfg.dataset.n or schedule.N_e + schedule.T)
            monitor = None
            if diagnose:
                mu_hat = estimate_reference(dataset, schedule.N_e, schedule.varsigma).mu_hat
                monitor = self.diagnostics.checkpoint_monitor(
                    model, mu, mu_hat, schedule, opt_reward, duality_gap=cfg.diagnostics.duality_gap
                )
            report = DpdlSolver(dims, schedule, settings=self.settings, numeric=self.numeric).run(
                dataset, initial_dist=model.initial_dist, monitor=monitor, checkpoint_count=cfg.diagnostics.checkpoints
            )
        else:
            if dataset is None:
                if cfg.dataset.n is None:
                    raise InvalidArgumentError(self.module, "adaptive mode needs dataset.n (or an existing dataset file)")
                dataset = self.sample(model, mu, behavior, cfg.dataset.n)
            driver = AdaptiveDpdl(
                dims,
                model.initial_dist,
                thresholds=solver.thresholds,
                T=solver.T,
                N_e=solver.N_e,
                N_v=solver.N_v,
                varsigma=solver.varsigma,
                eta=solver.eta,
                scale_budget=solver.scale_budget,
                seed=cfg.seed,
                settings=self.settings,
                numeric=self.numeric,
            )
            try:
                _, trace = driver.run(dataset, solver.epsilon, solver.delta, phi, solver.psi_init)
            except (DataExhaustedError, RoundCapExceededError) as e:
                if isinstance(e.partial, AdaptiveTrace):
                    write_record(self.output_dir / "adaptive_trace.json", e.partial)
                raise
            report = driver.final_report

        updates: Dict[str, Any] = {"experiment": cfg.model_dump(mode="json")}
        quality = self.diagnostics.policy_quality(model, report.policy, opt_reward)
        updates.update(reward_gap=quality["reward_gap"], violation=quality["violation"])
        if diagnose and cfg.diagnostics.duality_gap:
            c = report.config
            updates["gap_estimate"] = self.diagnostics.duality_gap(model, mu, report.mu_hat, report.x_bar, c.psi, c.phi, c.kappa)
        report = report.model_copy(update=updates)

        self.write_outputs(model, sidecar, mu, opt_reward, nu_star.values, report, trace)
        return ExperimentResult(report=report, trace=trace, output_dir=self.output_dir, concentrability=concentrability, slater_margin=phi)

    def write_outputs(
        self,
        model: CmdpModel,
        sidecar: Optional[InstanceSidecar],
        mu: Optional[np.ndarray],
        opt_reward: float,
        opt_occupancy: np.ndarray,
        report: SolveReport,
        trace: Optional[AdaptiveTrace],
    ) -> None:
        out = self.output_dir
        write_json(out / "config.json", self.config.model_dump(mode="json"))
        write_model(out / "model.json", model)
        if mu is not None:
            write_sidecar(
                out / "reference.json",
                InstanceSidecar(
                    family=sidecar.family if sidecar else "model",
                    params=sidecar.params if sidecar else {},
                    mu=mu,
                    optimal_policy=policy_of_occupancy(opt_occupancy).probs,
                    optimal_value=opt_reward,
                ),
            )
        write_record(out / "report.json", report)
        write_checkpoints(out / "checkpoints.csv", report.checkpoints)
        if trace is not None:
            write_record(out / "adaptive_trace.json", trace)
        self.logger.info("Run outputs written", output_dir=str(out), reward_gap=report.reward_gap, violation=report.violation)


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    return ExperimentRunner(config).run()


def _sweep_worker(payload: Dict[str, Any]) -> Dict[str, Any]:
    """Process-pool entry: one isolated run per seed."""
    config = ExperimentConfig.model_validate(payload)
    try:
        return run_experiment(config).summary()
    except CmdpLabError as e:
        return {"seed": config.seed, "error": str(e)}


# --- handlers -----------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    if args.family == "random":
        params = {"S": args.states, "A": args.actions, "I": args.constraints, "gamma": args.gamma, "slater_target": args.slater_target, "seed": args.seed}
    elif args.family == "hard":
        params = {"S": args.S, "A": args.A, "I": args.I, "C": args.C, "gamma": args.gamma, "seed": args.seed, "varpi_c": args.varpi_c, "varpi_u": args.varpi_u}
    else:
        params = {"S": args.S, "A": args.A, "C": args.C, "gamma": args.gamma, "seed": args.seed, "varpi": args.varpi}
    model, sidecar = generate_instance(args.family, params, args.mixture_weight)
    out = Path(args.out)
    write_model(out, model)
    write_sidecar(Path(args.sidecar) if args.sidecar else _sidecar_path(out), sidecar)
    logger.info("Instance written", family=args.family, path=str(out), states=model.num_states, constraints=model.num_constraints)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    model = read_model(args.model)
    sidecar = read_sidecar(args.sidecar) if args.sidecar else None
    oracle = LpOracleService()
    sampler = DatasetSampler()
    if args.mode == "sync":
        mu = reference_distribution(model, args.reference, sidecar, args.mixture_weight, oracle)
        dataset = sampler.sample_sync(model, mu, args.n, args.seed)
    else:
        behavior = behavior_policy(model, args.reference, sidecar, args.mixture_weight, oracle)
        dataset = sampler.sample_async(model, behavior, args.n, args.seed, burn_in=args.burn_in, start_state=args.start_state)
    write_dataset(args.out, dataset)
    logger.info("Dataset written", path=args.out, n=args.n, mode=args.mode)
    return 0


_RUN_OVERRIDES = {
    "epsilon": ("solver", "epsilon"),
    "delta": ("solver", "delta"),
    "psi": ("solver", "psi"),
    "phi": ("solver", "phi"),
    "psi_init": ("solver", "psi_init"),
    "T": ("solver", "T"),
    "N_e": ("solver", "N_e"),
    "N_v": ("solver", "N_v"),
    "varsigma": ("solver", "varsigma"),
    "eta": ("solver", "eta"),
    "mode": ("solver", "mode"),
    "n": ("dataset", "n"),
    "dataset_seed": ("dataset", "seed"),
    "dataset_mode": ("dataset", "mode"),
    "reference": ("dataset", "reference"),
    "checkpoints": ("diagnostics", "checkpoints"),
}


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file (if any) with command-line flags layered on top."""
    payload: Dict[str, Any] = read_experiment_config(args.config).model_dump(mode="json") if args.config else {}
    for section in ("instance", "dataset", "solver", "diagnostics"):
        payload.setdefault(section, {})
    if args.model:
        payload["instance"] = {"model_path": args.model, "sidecar_path": args.sidecar}
    elif args.sidecar:
        payload["instance"]["sidecar_path"] = args.sidecar
    if args.dataset:
        payload["dataset"]["path"] = args.dataset
    for flag, (section, field) in _RUN_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            payload[section][field] = value
    if args.no_ground_truth:
        payload["diagnostics"]["ground_truth"] = False
    if args.no_duality_gap:
        payload["diagnostics"]["duality_gap"] = False
    if args.output_dir:
        payload["output_dir"] = args.output_dir
    if args.seed is not None:
        payload["seed"] = args.seed
    try:
        return ExperimentConfig.model_validate(payload)
    except ValidationError as e:
        raise InvalidArgumentError(MODULE, f"invalid experiment configuration: {e}") from e


def cmd_run(args: argparse.Namespace) -> int:
    result = run_experiment(build_config(args))
    print(json.dumps(result.summary(), indent=2))
    return 0


def cmd_diagnose(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else None
    model_path = args.model or (run_dir / "model.json" if run_dir else None)
    sidecar_path = args.sidecar or (run_dir / "reference.json" if run_dir else None)
    report_path = args.report or (run_dir / "report.json" if run_dir else None)
    if model_path is None or report_path is None:
        raise InvalidArgumentError(MODULE, "diagnose needs --run-dir or both --model and --report")
    if sidecar_path is None or not Path(sidecar_path).is_file():
        raise InvalidArgumentError(MODULE, "diagnostics need the simulator ground truth mu (pass --sidecar)")
    model = read_model(model_path)
    sidecar = read_sidecar(sidecar_path)
    report = read_record(report_path, SolveReport, MODULE)
    diagnostics = DiagnosticsService().diagnose(model, sidecar.mu, report, duality_gap=not args.no_duality_gap)
    out = Path(args.out) if args.out else Path(report_path).with_name("diagnostics.json")
    write_record(out, diagnostics)
    print(json.dumps(diagnostics.model_dump(), indent=2))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = build_config(args)
    seeds = _parse_seeds(args.seeds)
    root = Path(base.output_dir or get_settings().output_dir)
    payloads = []
    for seed in seeds:
        config = base.model_copy(
            update={
                "seed": seed,
                "output_dir": str(root / f"seed_{seed}"),
                "dataset": base.dataset.model_copy(update={"seed": seed}),
            }
        )
        payloads.append(config.model_dump(mode="json"))

    workers = min(get_settings().threads, len(payloads))
    logger.info("Sweep started", seeds=len(seeds), workers=workers)
    if workers <= 1:
        rows = [_sweep_worker(p) for p in payloads]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_worker, payloads))

    frame = pd.DataFrame(rows).sort_values("seed")
    root.mkdir(parents=True, exist_ok=True)
    frame.to_csv(root / "sweep.csv", index=False)
    failures = int(frame["error"].notna().sum()) if "error" in frame.columns else 0
    logger.info("Sweep finished", seeds=len(seeds), failures=failures, path=str(root / "sweep.csv"))
    return 0


# --- parser -------------------------------------------------------------------


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Experiment configuration JSON")
    parser.add_argument("--model", help="Model file (overrides the configured instance)")
    parser.add_argument("--sidecar", help="Sidecar with the true reference distribution")
    parser.add_argument("--dataset", help="Existing dataset file")
    parser.add_argument("--mode", choices=["dpdl", "adaptive"])
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--psi", type=float)
    parser.add_argument("--phi", type=float)
    parser.add_argument("--psi-init", dest="psi_init", type=float)
    parser.add_argument("--T", type=int)
    parser.add_argument("--N-e", dest="N_e", type=int)
    parser.add_argument("--N-v", dest="N_v", type=int)
    parser.add_argument("--varsigma", type=float)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--n", type=int, help="Tuples to sample when no dataset file is given")
    parser.add_argument("--dataset-seed", dest="dataset_seed", type=int)
    parser.add_argument("--dataset-mode", dest="dataset_mode", choices=["sync", "async"])
    parser.add_argument("--reference", choices=["sidecar", "uniform", "optimal-mixture"])
    parser.add_argument("--checkpoints", type=int, help="Checkpoint rows in checkpoints.csv")
    parser.add_argument("--no-ground-truth", dest="no_ground_truth", action="store_true")
    parser.add_argument("--no-duality-gap", dest="no_duality_gap", action="store_true")
    parser.add_argument("--output-dir", dest="output_dir")
    parser.add_argument("--seed", type=int, help="Solver seed")


def register_commands(subparsers: argparse._SubParsersAction) -> None:
    """Attach every sub-command to the top-level parser."""
    gen = subparsers.add_parser("gen", help="Generate a CMDP instance and its sidecar")
    families = gen.add_subparsers(dest="family", required=True)
    for name in ("random", "hard", "slater"):
        sub = families.add_parser(name)
        sub.add_argument("--gamma", type=float, required=True)
        sub.add_argument("--seed", type=int, default=0)
        sub.add_argument("--out", default="model.json")
        sub.add_argument("--sidecar", help="Sidecar path (default: <out stem>.sidecar.json)")
        sub.add_argument("--mixture-weight", dest="mixture_weight", type=float, default=0.5)
        sub.set_defaults(handler=cmd_gen)
    random_parser = families.choices["random"]
    random_parser.add_argument("--states", type=int, required=True)
    random_parser.add_argument("--actions", type=int, required=True)
    random_parser.add_argument("--constraints", type=int, default=0)
    random_parser.add_argument("--slater-target", dest="slater_target", type=float, default=0.1)
    for name in ("hard", "slater"):
        sub = families.choices[name]
        sub.add_argument("--S", type=int, required=True)
        sub.add_argument("--A", type=int, required=True)
        sub.add_argument("--C", type=float, required=True)
    families.choices["hard"].add_argument("--I", type=int, required=True)
    families.choices["hard"].add_argument("--varpi-c", dest="varpi_c", type=float, default=0.5)
    families.choices["hard"].add_argument("--varpi-u", dest="varpi_u", type=float, default=0.5)
    families.choices["slater"].add_argument("--varpi", type=float, default=0.5)

    sample = subparsers.add_parser("sample", help="Sample an offline dataset")
    sample.add_argument("mode", choices=["sync", "async"])
    sample.add_argument("--model", required=True)
    sample.add_argument("--sidecar")
    sample.add_argument("--reference", choices=["sidecar", "uniform", "optimal-mixture"], default="optimal-mixture")
    sample.add_argument("--mixture-weight", dest="mixture_weight", type=float, default=0.5)
    sample.add_argument("--n", type=int, required=True)
    sample.add_argument("--seed", type=int, default=0)
    sample.add_argument("--burn-in", dest="burn_in", type=int, default=0)
    sample.add_argument("--start-state", dest="start_state", type=int)
    sample.add_argument("--out", default="dataset.csv")
    sample.set_defaults(handler=cmd_sample)

    run = subparsers.add_parser("run", help="Run DPDL or the adaptive driver")
    _add_run_flags(run)
    run.set_defaults(handler=cmd_run)

    diagnose = subparsers.add_parser("diagnose", help="Recompute report numbers against the oracle")
    diagnose.add_argument("--run-dir", dest="run_dir")
    diagnose.add_argument("--model")
    diagnose.add_argument("--sidecar")
    diagnose.add_argument("--report")
    diagnose.add_argument("--out")
    diagnose.add_argument("--no-duality-gap", dest="no_duality_gap", action="store_true")
    diagnose.set_defaults(handler=cmd_diagnose)

    sweep = subparsers.add_parser("sweep", help="Run one configuration over a range of seeds")
    _add_run_flags(sweep)
    sweep.add_argument("--seeds", required=True, help="Inclusive seed range a..b")
    sweep.set_defaults(handler=cmd_sweep)
