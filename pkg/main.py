import argparse
import sys

import numpy as np
from pydantic import ValidationError as PydanticValidationError

from container import container
from services.errors import (
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    MasterInfeasible,
    NumericalError,
    PolicyLabError,
)
from services.instance_service import (
    SubproblemSolver,
    TwoStageInstance,
    build_extensive_form,
    first_stage_objective,
    generate_synthetic,
    instance_to_document,
    load_instance,
    mean_value_instance,
    preset_spec,
    SyntheticSpec,
    write_instance,
)
from services.lshaped_service import solve_lshaped
from services.policy_service import (
    TrainingDataset,
    cell_affine_ranks,
    dataset_from_lp,
    dataset_from_lshaped,
    dataset_from_sd,
    evaluate_policy,
    fit_pointwise_baseline,
    fit_policy,
    load_dataset,
    load_policy,
    save_dataset,
    save_policy,
)
from services.rhs_sampling_service import sample_rhs
from services.sd_service import solve_sd
from services.sequential_service import run_sequential
from services.simplex_service import LpStatus, solve_lp
from utils import json_utils
from utils.config_utils import RunConfig, config_document, load_config
from utils.random_utils import STREAM_LHS_PERMUTATION, STREAM_RHS, substream
from utils.report_utils import write_csv_report

TRAIN_BRANCH = 0
EVALUATE_BRANCH = 1

EVALUATION_COLUMNS = ["b_id", "feasible", "feas_gap", "rel_opt_gap", "wall_micros"]
ROUND_COLUMNS = ["round", "n_t", "R", "R_ci", "p_or_r", "p_ci", "cells", "cuts", "train_size", "appended", "outside"]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(EXIT_USAGE)


def _vector(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON run config")
    common.add_argument("-o", "--output", default=argparse.SUPPRESS, help="output path")
    common.add_argument(
        "--log-level",
        default=argparse.SUPPRESS,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        type=str.upper,
    )

    parser = _Parser(prog="pldc", description="Decomposition-guided PLDC policies for two-stage stochastic LPs.", parents=[common])
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    generate = commands.add_parser("generate", parents=[common], help="write a synthetic instance")
    generate.add_argument("--preset", default=None)
    generate.add_argument("--d-x", dest="d_x", type=int, default=None)
    generate.add_argument("--m1", type=int, default=None)
    generate.add_argument("--m2", type=int, default=None)
    generate.add_argument("--recourse-columns", dest="recourse_columns", type=int, default=None)
    generate.add_argument("--scenarios", type=int, default=None)
    generate.add_argument("--mean-value", dest="mean_value", action="store_true", default=None)

    solve = commands.add_parser("solve", parents=[common], help="solve one instance at one right-hand side")
    solve.add_argument("--instance", default=None)
    solve.add_argument("--method", choices=["lshaped", "sd", "extensive"], default=None)
    solve.add_argument("--b", type=_vector, default=None, help="right-hand side, comma separated")

    train = commands.add_parser("train", parents=[common], help="fit a policy with the static procedure")
    train.add_argument("--instance", default=None)
    train.add_argument("--method", choices=["lshaped", "sd", "lp"], default=None)
    train.add_argument("--rhs-count", dest="rhs_count", type=int, default=None)
    train.add_argument("--rhs-mode", dest="rhs_mode", choices=["time_series", "latin_hypercube"], default=None)
    train.add_argument("--relaxed", action="store_true", default=None)
    train.add_argument("--pointwise", action="store_true", default=False)
    train.add_argument("--cell-key", dest="cell_key", choices=["full", "xeta"], default=None)
    train.add_argument("--backend", choices=["auto", "highs", "simplex"], default=None)
    train.add_argument("--dataset", default=None, help="train on a stored dataset")
    train.add_argument("--save-dataset", dest="save_dataset", default=None)
    train.add_argument("--report", default=None, help="training report path (stdout otherwise)")

    evaluate = commands.add_parser("evaluate", parents=[common], help="score a policy on fresh right-hand sides")
    evaluate.add_argument("--policy", required=True)
    evaluate.add_argument("--instance", default=None)
    evaluate.add_argument("--rhs-count", dest="rhs_count", type=int, default=None)
    evaluate.add_argument("--rhs-mode", dest="rhs_mode", choices=["time_series", "latin_hypercube"], default=None)
    evaluate.add_argument("--timing", action="store_true", default=None)

    sequential = commands.add_parser("sequential", parents=[common], help="refine a policy round by round")
    sequential.add_argument("--instance", default=None)
    sequential.add_argument("--solver", choices=["LShaped", "SD"], default=None)
    sequential.add_argument("--n0", type=int, default=None)
    sequential.add_argument("--growth", type=float, default=None)
    sequential.add_argument("--min-rounds", dest="min_rounds", type=int, default=None)
    sequential.add_argument("--max-rounds", dest="max_rounds", type=int, default=None)
    sequential.add_argument("--ci-tol", dest="ci_tol", type=float, default=None)
    sequential.add_argument("--opt-ci-tol", dest="opt_ci_tol", type=float, default=None)
    sequential.add_argument("--rounds-csv", dest="rounds_csv", default=None)
    return parser


def _overrides(args) -> dict:
    seed = getattr(args, "seed", None)
    sections = {
        "seed": seed,
        "threads": getattr(args, "threads", None),
        "instance": {
            "path": getattr(args, "instance", None),
            "preset": getattr(args, "preset", None),
            "d_x": getattr(args, "d_x", None),
            "m1": getattr(args, "m1", None),
            "m2": getattr(args, "m2", None),
            "recourse_columns": getattr(args, "recourse_columns", None),
            "scenarios": getattr(args, "scenarios", None),
            "mean_value": getattr(args, "mean_value", None),
        },
        "rhs": {"seed": seed, "mode": getattr(args, "rhs_mode", None), "horizon": getattr(args, "rhs_count", None)},
        "solver": {"method": getattr(args, "method", None), "sd": {"seed": seed}},
        "policy": {
            "relaxed": getattr(args, "relaxed", None),
            "cell_key": getattr(args, "cell_key", None),
            "backend": getattr(args, "backend", None),
        },
        "evaluation": {"timing": getattr(args, "timing", None)},
        "sequential": {
            "seed": seed,
            "solver": getattr(args, "solver", None),
            "n0": getattr(args, "n0", None),
            "growth": getattr(args, "growth", None),
            "min_rounds": getattr(args, "min_rounds", None),
            "max_rounds": getattr(args, "max_rounds", None),
            "ci_tol": getattr(args, "ci_tol", None),
            "opt_ci_tol": getattr(args, "opt_ci_tol", None),
        },
        "output": {"path": getattr(args, "output", None)},
    }
    if sections["solver"]["method"] == "lp":
        sections["solver"]["method"] = None
    return sections


def _instance(cfg: RunConfig) -> TwoStageInstance:
    section = cfg.instance
    if section.path:
        inst = load_instance(section.path)
    else:
        shape = {
            key: value
            for key, value in {
                "d_x": section.d_x,
                "m1": section.m1,
                "m2": section.m2,
                "recourse_columns": section.recourse_columns,
                "num_scenarios": section.scenarios,
            }.items()
            if value is not None
        }
        preset = section.preset or (None if section.d_x else "pgp2-shape")
        try:
            spec = preset_spec(preset, seed=cfg.seed, **shape) if preset else SyntheticSpec(seed=cfg.seed, **shape)
        except PydanticValidationError as e:
            raise ConfigError(f"invalid instance section: {e}") from e
        inst = generate_synthetic(spec)
    return mean_value_instance(inst) if section.mean_value else inst


def _with_resolved_rhs(cfg: RunConfig, inst: TwoStageInstance) -> RunConfig:
    """Config with the right-hand-side generator defaults filled in from ``inst``."""
    return cfg.model_copy(update={"rhs": cfg.rhs.resolve(inst.b_nominal, inst.perturbed_rows)})


def _draw_rhs(cfg: RunConfig, inst: TwoStageInstance, branch: int) -> np.ndarray:
    rhs_cfg = cfg.rhs.resolve(inst.b_nominal, inst.perturbed_rows)
    stream = STREAM_RHS if rhs_cfg.mode == "time_series" else STREAM_LHS_PERMUTATION
    return sample_rhs(rhs_cfg, inst.b_nominal, substream(rhs_cfg.seed, stream, branch))


def _emit(document: dict, path) -> None:
    if path:
        json_utils.write_json(path, document)
    else:
        sys.stdout.write(json_utils.dumps(document) + "\n")


def cmd_generate(cfg: RunConfig, args) -> int:
    inst = _instance(cfg)
    if cfg.output.path:
        write_instance(inst, cfg.output.path)
    else:
        sys.stdout.write(json_utils.dumps(instance_to_document(inst)) + "\n")
    container.logger.info(f"generate: wrote {inst.name}")
    return EXIT_OK


def cmd_solve(cfg: RunConfig, args) -> int:
    inst = _instance(cfg)
    b = np.asarray(args.b, dtype=float) if args.b is not None else inst.b_nominal
    solver = SubproblemSolver(inst, container.parallel_map)
    report = {"config": config_document(cfg), "method": cfg.solver.method, "b": b}
    if cfg.solver.method == "extensive":
        solution = solve_lp(build_extensive_form(inst, b))
        if solution.status is LpStatus.INFEASIBLE:
            raise MasterInfeasible("extensive form is infeasible at this b")
        if solution.status is not LpStatus.OPTIMAL:
            raise NumericalError(f"extensive form ended {solution.status.value}")
        report.update(x=solution.x[: inst.d_x], objective=solution.objective, iterations=solution.iterations)
    elif cfg.solver.method == "sd":
        result = solve_sd(inst, b, cfg.solver.sd, solver=solver)
        report.update(
            x=result.incumbent,
            estimate=result.value_estimate,
            objective=first_stage_objective(inst, result.incumbent, solver),
            iterations=result.iterations,
            dual_vertices=len(result.dual_vertices),
            active_cuts=[cut.to_document() for cut in result.cuts_active],
        )
    else:
        result = solve_lshaped(inst, b, cfg.solver.lshaped, solver=solver)
        report.update(
            x=result.x_star,
            eta=result.eta_star,
            objective=result.v_star,
            iterations=result.iterations,
            converged=result.converged,
            active_cuts=[cut.to_document() for cut in result.cuts_active],
        )
    _emit(report, cfg.output.path)
    return EXIT_OK


def _training_dataset(cfg: RunConfig, args, inst: TwoStageInstance | None) -> TrainingDataset:
    if args.dataset:
        return load_dataset(args.dataset)
    rhs = _draw_rhs(cfg, inst, TRAIN_BRANCH)
    if args.method == "lp":
        return dataset_from_lp(inst.c, inst.A, rhs)
    if cfg.solver.method == "sd":
        return dataset_from_sd(inst, rhs, cfg.solver.sd, cfg.solver.oos_samples, cfg.seed, container.parallel_map)
    return dataset_from_lshaped(inst, rhs, cfg.solver.lshaped, container.parallel_map)


def cmd_train(cfg: RunConfig, args) -> int:
    inst = None if args.dataset else _instance(cfg)
    if inst is not None:
        cfg = _with_resolved_rhs(cfg, inst)
    dataset = _training_dataset(cfg, args, inst)
    if args.save_dataset:
        save_dataset(dataset, args.save_dataset)
    fit = fit_pointwise_baseline if args.pointwise else fit_policy
    policy = fit(dataset, cfg.policy, container.parallel_map)
    policy.metadata.update(seed=cfg.seed, source=args.dataset or (args.method or cfg.solver.method))
    if cfg.output.path:
        save_policy(policy, cfg.output.path)
    report = {
        "config": config_document(cfg),
        **policy.metadata,
        "infeasible_rhs": dataset.infeasible_rhs,
        "cell_sizes": [len(cell.members) for cell in policy.cells],
        "cell_affine_ranks": cell_affine_ranks(dataset, policy.cells),
    }
    _emit(report, args.report)
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    policy = load_policy(args.policy)
    inst = _instance(cfg)
    cfg = _with_resolved_rhs(cfg, inst)
    rhs = _draw_rhs(cfg, inst, EVALUATE_BRANCH)
    result = evaluate_policy(policy, inst, rhs, cfg.evaluation, cfg.solver.lshaped, container.parallel_map)
    rows = [
        {
            "b_id": r.b_id,
            "feasible": int(r.feasible),
            "feas_gap": r.feas_gap,
            "rel_opt_gap": r.rel_opt_gap,
            "wall_micros": r.wall_micros,
        }
        for r in result.records
    ]
    metadata = {"config": config_document(cfg), "policy": args.policy}
    path = cfg.output.path or sys.stdout
    write_csv_report(path, rows, EVALUATION_COLUMNS, metadata, result.summary)
    return EXIT_OK


def cmd_sequential(cfg: RunConfig, args) -> int:
    inst = _instance(cfg)
    cfg = _with_resolved_rhs(cfg, inst)
    seq = cfg.sequential
    rhs_cfg = cfg.rhs.model_copy(update={"horizon": seq.n0})
    initial = _draw_rhs(cfg.model_copy(update={"rhs": rhs_cfg}), inst, TRAIN_BRANCH)
    if seq.solver == "SD":
        dataset = dataset_from_sd(inst, initial, cfg.solver.sd, seq.oos_samples, seq.seed, container.parallel_map)
    else:
        dataset = dataset_from_lshaped(inst, initial, cfg.solver.lshaped, container.parallel_map)
    result = run_sequential(
        inst,
        seq,
        dataset,
        rhs_cfg=cfg.rhs,
        policy_opts=cfg.policy,
        lshaped_opts=cfg.solver.lshaped,
        sd_opts=cfg.solver.sd,
        mapper=container.parallel_map,
    )
    result.policy.metadata.update(seed=cfg.seed, source=f"sequential-{seq.solver}")
    if cfg.output.path:
        save_policy(result.policy, cfg.output.path)
    rows = [
        {
            "round": r.round,
            "n_t": r.batch_size,
            "R": r.infeasible_fraction,
            "R_ci": r.feas_ci_upper,
            "p_or_r": r.suboptimal_fraction,
            "p_ci": r.opt_ci_upper,
            "cells": r.cells,
            "cuts": r.bundle_size,
            "train_size": r.training_size,
            "appended": r.appended,
            "outside": r.infeasible_rhs,
        }
        for r in result.history
    ]
    summary = {
        "stopped": result.reason,
        "T_feas": result.t_feas if result.t_feas is not None else "none",
        "T_opt": result.t_opt if result.t_opt is not None else "none",
        "observations": result.history[-1].observations if result.history else 0,
        "infeasible_rhs": dataset.infeasible_rhs + sum(r.infeasible_rhs for r in result.history),
    }
    write_csv_report(args.rounds_csv or sys.stdout, rows, ROUND_COLUMNS, {"config": config_document(cfg)}, summary)
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sequential": cmd_sequential,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        container.configure(threads=getattr(args, "threads", None), log_level=getattr(args, "log_level", None))
    except ValueError as e:
        sys.stderr.write(f"pldc: error: {e}\n")
        return EXIT_USAGE
    logger = container.logger
    try:
        cfg = load_config(getattr(args, "config", None), _overrides(args))
        if cfg.threads is not None:
            container.configure(threads=cfg.threads)
        return COMMANDS[args.command](cfg, args)
    except PolicyLabError as e:
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(f"pldc {args.command}: {type(e).__name__}: {e}\n")
        return e.exit_code
    except np.linalg.LinAlgError as e:
        logger.error(f"{args.command} failed: {e}")
        sys.stderr.write(f"pldc {args.command}: LinAlgError: {e}\n")
        return EXIT_NUMERICAL
    finally:
        container.shutdown()


if __name__ == "__main__":
    sys.exit(main())
