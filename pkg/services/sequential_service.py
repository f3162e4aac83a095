"""Sequential policy refinement.

Each round draws a fresh batch of right-hand sides, measures how often the
current policy is infeasible and, once that is rare enough, how often it is
suboptimal. Only the points the policy got wrong are solved into the
training data before the policy is refit.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import t as student_t

from services.errors import ValidationError
from services.instance_service import (
    SubproblemSolver,
    TwoStageInstance,
    draw_scenarios,
    first_stage_objective,
)
from services.lshaped_service import LShapedOptions
from services.policy_service import (
    PLDCPolicy,
    PolicyOptions,
    TrainingDataset,
    apply_policy_batch,
    feasibility_gap,
    fit_policy_with_fallback,
    optimality_gap,
    sd_points,
    solve_points_lshaped,
    solve_points_sd,
)
from services.rhs_sampling_service import RhsGeneratorConfig, build_rhs_pool, sample_rhs
from services.sd_service import SdOptions, build_oos_bundle
from utils.random_utils import STREAM_BATCH, STREAM_TEST, substream

logger = logging.getLogger("PLDC")


def _serial_map(fn, items):
    return list(map(fn, items))


class SequentialConfig(BaseModel):
    """Batch growth, confidence levels and stopping limits of a sequential run.

    Round t draws n_t = ceil(growth * n_{t-1}) right-hand sides starting from n0.
    The run stops once both upper confidence bounds fall below their tolerances,
    but not before min_rounds.
    """

    model_config = ConfigDict(extra="forbid")

    n0: int = Field(default=2, ge=1)
    growth: float = Field(default=1.1, gt=1.0)
    z_score: float = Field(default=1.96, gt=0)
    ci_tol: float = Field(default=0.05, gt=0, lt=1)
    opt_ci_tol: float = Field(default=0.05, gt=0)
    eps_feas: float = Field(default=1e-6, gt=0)
    eps_opt: float = Field(default=5e-4, gt=0)
    gap: Literal["relative", "absolute"] = "relative"
    nu: float = Field(default=0.05, gt=0, lt=1)
    test_samples: int = Field(default=30, ge=2)
    test_samples_max: int = Field(default=960, ge=2)
    min_rounds: int = Field(default=20, ge=0)
    max_rounds: int = Field(default=80, ge=1)
    solver: Literal["LShaped", "SD"] = "LShaped"
    batch_source: Literal["pool", "generator"] = "pool"
    pool_size: int = Field(default=5000, ge=1)
    oos_samples: int = Field(default=2000, ge=1)
    seed: int = Field(default=0, ge=0)


@dataclass
class FeasibilityStats:
    fraction: float
    ci_upper: float
    feasible_indices: list[int]
    gaps: np.ndarray = field(repr=False)


@dataclass
class SuboptimalityStats:
    fraction: float
    ci_upper: float
    suboptimal_indices: list[int]
    count: int


@dataclass
class HypothesisTest:
    accept: bool
    mean_gap: float
    std_gap: float
    sample_size: int


@dataclass
class RoundRecord:
    round: int
    batch_size: int
    infeasible_fraction: float
    feas_ci_upper: float
    suboptimal_fraction: float
    opt_ci_upper: float
    cells: int
    bundle_size: int
    training_size: int
    appended: int
    observations: int
    infeasible_rhs: int = 0

    def to_row(self) -> dict:
        return asdict(self)


@dataclass
class SequentialResult:
    policy: PLDCPolicy
    dataset: TrainingDataset
    history: list[RoundRecord]
    reason: Literal["converged", "max_rounds"]
    t_feas: int | None = None
    t_opt: int | None = None


def ci_half_width(z_score: float, n: int) -> float:
    """z/(2 sqrt n): the worst-case half width of a proportion's interval."""
    return z_score / (2.0 * math.sqrt(n))


def feasibility_stats(policy: PLDCPolicy, batch, eps_feas: float = 1e-6, z_score: float = 1.96) -> FeasibilityStats:
    """Fraction of the batch where the policy output violates Ax = b or x >= 0 beyond eps_feas.

    Args:
        policy (PLDCPolicy): Policy under test.
        batch (array): Right-hand sides, one per row.
        eps_feas (float): Largest tolerated feasibility gap.
        z_score (float): Normal quantile of the confidence level.

    Returns:
        FeasibilityStats: Infeasible fraction, its upper confidence bound, the
        indices of feasible rows and the gap of every row.

    Raises:
        ValidationError: If the batch is empty.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=float))
    if batch.shape[0] == 0:
        raise ValidationError("feasibility statistics need a nonempty batch")
    outputs = apply_policy_batch(policy, batch)
    d_x = policy.c.size
    gaps = np.array([feasibility_gap(policy.A, b, y[:d_x]) for b, y in zip(batch, outputs)])
    feasible = [int(i) for i in np.flatnonzero(gaps <= eps_feas)]
    n = batch.shape[0]
    fraction = 1.0 - len(feasible) / n
    return FeasibilityStats(fraction, fraction + ci_half_width(z_score, n), feasible, gaps)


def _proportion(flags: list[bool], z_score: float) -> SuboptimalityStats:
    m = len(flags)
    bad = [i for i, flag in enumerate(flags) if flag]
    if m == 0:
        return SuboptimalityStats(0.0, math.inf, [], 0)
    fraction = len(bad) / m
    return SuboptimalityStats(fraction, fraction + ci_half_width(z_score, m), bad, m)


def suboptimality_stats_lshaped(
    policy: PLDCPolicy,
    inst: TwoStageInstance,
    feasible_batch,
    eps_opt: float = 5e-4,
    z_score: float = 1.96,
    v_stars=None,
    gap: str = "relative",
    lshaped_opts: LShapedOptions | None = None,
    mapper: Callable | None = None,
) -> SuboptimalityStats:
    """Fraction of feasible points whose exact objective at x_hat misses v* by more than eps_opt.

    ``v_stars`` are the decomposition optima of the batch; they are solved
    here when omitted.
    """
    mapper = mapper or _serial_map
    feasible_batch = np.atleast_2d(np.asarray(feasible_batch, dtype=float))
    if feasible_batch.shape[0] == 0:
        return _proportion([], z_score)
    if v_stars is None:
        solved = solve_points_lshaped(inst, feasible_batch, lshaped_opts, mapper, tag="subopt")
        # NaN optima never compare as suboptimal
        v_stars = [entry[0].v_star if entry is not None else math.nan for entry in solved]
    outputs = apply_policy_batch(policy, feasible_batch)

    def check(item):
        y, v_star = item
        value = first_stage_objective(inst, y[: inst.d_x], SubproblemSolver(inst))
        return optimality_gap(value, v_star, gap) > eps_opt

    flags = mapper(check, list(zip(outputs, v_stars)))
    return _proportion(flags, z_score)


def _test_gaps(inst: TwoStageInstance, x_star, x_hat, sample) -> np.ndarray:
    solver = SubproblemSolver(inst)
    at_star = np.array([r.value for r in solver.solve_many(x_star, sample)])
    if np.array_equal(x_star, x_hat):
        return np.zeros(at_star.size)
    at_hat = np.array([r.value for r in solver.solve_many(x_hat, sample)])
    return (inst.c @ x_star + at_star) - (inst.c @ x_hat + at_hat)


def choose_test_sample_size(
    inst: TwoStageInstance,
    x_star,
    x_hat,
    seed: int,
    keys: tuple[int, ...] = (),
    start: int = 30,
    maximum: int = 960,
    var_tol: float = 0.01,
) -> int:
    """Smallest M (doubling from ``start``) with gap variance below var_tol * (|mean| + 1).

    Args:
        inst (TwoStageInstance): Instance whose scenarios are resampled.
        x_star (array): Incumbent first-stage decision.
        x_hat (array): Policy first-stage decision.
        seed (int): Root seed of the test stream.
        keys (tuple): Extra stream keys, usually round and batch index.
        start (int): First sample size tried.
        maximum (int): Cap returned when the variance never settles.
        var_tol (float): Relative variance tolerance.

    Returns:
        int: The chosen sample size.
    """
    x_star = np.asarray(x_star, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    M = min(start, maximum)
    while True:
        sample = draw_scenarios(inst, M, substream(seed, STREAM_TEST, *keys))
        gaps = _test_gaps(inst, x_star, x_hat, sample)
        if gaps.var(ddof=1) < var_tol * (abs(gaps.mean()) + 1.0) or M >= maximum:
            return M
        M = min(2 * M, maximum)


def hypothesis_test_sd(
    inst: TwoStageInstance,
    b,
    x_star,
    x_hat,
    M: int,
    nu: float = 0.05,
    seed: int = 0,
    keys: tuple[int, ...] = (),
) -> HypothesisTest:
    """Paired t-test of f(x_star) = f(x_hat) on M common scenarios.

    The sample comes from its own stream, independent of the one the SD run
    drew from. Identical per-scenario objectives accept without a test.
    """
    if M < 2:
        raise ValidationError("hypothesis test needs M >= 2")
    x_star = np.asarray(x_star, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    sample = draw_scenarios(inst, M, substream(seed, STREAM_TEST, *keys))
    gaps = _test_gaps(inst, x_star, x_hat, sample)
    mean, std = float(gaps.mean()), float(gaps.std(ddof=1))
    if np.all(gaps == 0.0):
        return HypothesisTest(True, 0.0, 0.0, M)
    if std == 0.0:
        accept = False
    else:
        statistic = math.sqrt(M) * abs(mean) / std
        accept = statistic <= student_t.ppf(1.0 - nu / 2.0, M - 1)
    logger.debug(f"hypothesis_test_sd: b={np.round(b, 6).tolist()} M={M} mean={mean:.6g} std={std:.6g} accept={accept}")
    return HypothesisTest(bool(accept), mean, std, M)


def suboptimality_stats_sd(
    policy: PLDCPolicy,
    inst: TwoStageInstance,
    feasible_batch,
    incumbents,
    cfg: SequentialConfig,
    round_index: int = 0,
    mapper: Callable | None = None,
) -> SuboptimalityStats:
    """Fraction of feasible points whose hypothesis test rejects x_hat against the SD incumbent."""
    mapper = mapper or _serial_map
    feasible_batch = np.atleast_2d(np.asarray(feasible_batch, dtype=float))
    if feasible_batch.shape[0] == 0:
        return _proportion([], cfg.z_score)
    outputs = apply_policy_batch(policy, feasible_batch)

    def check(item):
        j, (b, y, x_star) = item
        x_hat = y[: inst.d_x]
        keys = (round_index, j)
        M = choose_test_sample_size(
            inst, x_star, x_hat, cfg.seed, keys, start=cfg.test_samples, maximum=cfg.test_samples_max
        )
        return not hypothesis_test_sd(inst, b, x_star, x_hat, M, cfg.nu, cfg.seed, keys).accept

    flags = mapper(check, list(enumerate(zip(feasible_batch, outputs, incumbents))))
    return _proportion(flags, cfg.z_score)


def draw_batch(cfg: SequentialConfig, round_index: int, size: int, pool=None, rhs_cfg=None, b_nominal=None) -> np.ndarray:
    """Round batch: resampled with replacement from the pool, or drawn fresh from the generator.

    Both sources draw from the batch stream keyed by ``round_index``, so a rerun
    with the same seed sees the same batches.
    """
    rng = substream(cfg.seed, STREAM_BATCH, round_index)
    if cfg.batch_source == "pool":
        pool = np.atleast_2d(np.asarray(pool, dtype=float))
        return pool[rng.integers(0, pool.shape[0], size=size)]
    return sample_rhs(rhs_cfg.model_copy(update={"horizon": size}), b_nominal, rng)


def _solve_batch(inst, batch, indices, cfg, round_index, lshaped_opts, sd_opts, mapper):
    """Decomposition solves at batch[indices]: (training point, cuts, SD incumbent) per index.

    Indices whose right-hand side leaves the first-stage region infeasible are absent.
    """
    if not indices:
        return {}
    rhs = batch[indices]
    tag = f"r{round_index}-"
    if cfg.solver == "LShaped":
        solved = solve_points_lshaped(inst, rhs, lshaped_opts, mapper, tag=tag)
        return {i: (entry[0], entry[1], entry[0].x_star) for i, entry in zip(indices, solved) if entry is not None}
    solved = solve_points_sd(inst, rhs, sd_opts, mapper, tag=tag)
    pairs = [(i, entry) for i, entry in zip(indices, solved) if entry is not None]
    if not pairs:
        return {}
    indices = [i for i, _ in pairs]
    solved = [entry for _, entry in pairs]
    bundle = build_oos_bundle(inst, [(b, r.incumbent) for b, r in solved], cfg.oos_samples, cfg.seed)
    points = sd_points(bundle, solved)
    return {
        i: (point, [cut for cut in bundle if cut.origin[1] == position], result.incumbent)
        for position, (i, point, (_, result)) in enumerate(zip(indices, points, solved))
    }


def run_sequential(
    inst: TwoStageInstance,
    cfg: SequentialConfig,
    initial_dataset: TrainingDataset,
    rhs_cfg: RhsGeneratorConfig | None = None,
    policy_opts: PolicyOptions | None = None,
    lshaped_opts: LShapedOptions | None = None,
    sd_opts: SdOptions | None = None,
    mapper: Callable | None = None,
    on_round: Callable[[RoundRecord], None] | None = None,
) -> SequentialResult:
    """Refines the policy round by round until both confidence bounds pass or max_rounds.

    Raises:
        ValidationError: If the initial dataset is empty.
    """
    if len(initial_dataset) == 0:
        raise ValidationError("sequential procedure needs a nonempty initial dataset")
    mapper = mapper or _serial_map
    rhs_cfg = (rhs_cfg or RhsGeneratorConfig()).resolve(inst.b_nominal, inst.perturbed_rows)
    pool = build_rhs_pool(rhs_cfg, inst.b_nominal, cfg.pool_size) if cfg.batch_source == "pool" else None

    dataset = initial_dataset
    policy = fit_policy_with_fallback(dataset, policy_opts, mapper)
    history: list[RoundRecord] = []
    t_feas = t_opt = None
    observations = 0
    n_t = math.ceil(cfg.growth * cfg.n0)
    reason = "max_rounds"

    for round_index in range(1, cfg.max_rounds + 1):
        batch = draw_batch(cfg, round_index, n_t, pool, rhs_cfg, inst.b_nominal)
        observations += n_t
        feas = feasibility_stats(policy, batch, cfg.eps_feas, cfg.z_score)
        feasible = feas.feasible_indices
        feasible_set = set(feasible)
        infeasible = [i for i in range(n_t) if i not in feasible_set]
        if t_feas is None and feas.ci_upper <= cfg.ci_tol:
            t_feas = round_index

        opt = SuboptimalityStats(math.nan, math.nan, [], 0)
        if feas.ci_upper <= cfg.ci_tol:
            solved = _solve_batch(inst, batch, list(range(n_t)), cfg, round_index, lshaped_opts, sd_opts, mapper)
            outside = n_t - len(solved)
            feasible = [i for i in feasible if i in solved]
            if cfg.solver == "LShaped":
                v_stars = [solved[i][0].v_star for i in feasible]
                opt = suboptimality_stats_lshaped(
                    policy, inst, batch[feasible], cfg.eps_opt, cfg.z_score, v_stars, cfg.gap, mapper=mapper
                )
            else:
                incumbents = [solved[i][2] for i in feasible]
                opt = suboptimality_stats_sd(policy, inst, batch[feasible], incumbents, cfg, round_index, mapper)
            suboptimal = [feasible[j] for j in opt.suboptimal_indices]
        else:
            solved = _solve_batch(inst, batch, infeasible, cfg, round_index, lshaped_opts, sd_opts, mapper)
            outside = len(infeasible) - len(solved)
            suboptimal = []
        if t_opt is None and opt.count and opt.ci_upper <= cfg.opt_ci_tol:
            t_opt = round_index

        converged = feas.ci_upper <= cfg.ci_tol and opt.count > 0 and opt.ci_upper <= cfg.opt_ci_tol
        appended = 0
        if not (converged and round_index >= cfg.min_rounds):
            chosen = sorted(i for i in set(infeasible) | set(suboptimal) if i in solved)
            points = [solved[i][0] for i in chosen]
            cuts = [cut for i in chosen for cut in solved[i][1]]
            appended = dataset.extend(points, cuts)
            if appended:
                policy = fit_policy_with_fallback(dataset, policy_opts, mapper)

        record = RoundRecord(
            round=round_index,
            batch_size=n_t,
            infeasible_fraction=feas.fraction,
            feas_ci_upper=feas.ci_upper,
            suboptimal_fraction=opt.fraction,
            opt_ci_upper=opt.ci_upper,
            cells=policy.num_cells,
            bundle_size=len(dataset.bundle),
            training_size=len(dataset),
            appended=appended,
            observations=observations,
            infeasible_rhs=outside,
        )
        history.append(record)
        logger.info(
            f"run_sequential: round {round_index} n={n_t} R={feas.fraction:.4f} (ci {feas.ci_upper:.4f}) "
            f"p={opt.fraction:.4f} (ci {opt.ci_upper:.4f}) cells={policy.num_cells} appended={appended}"
            + (f" outside_region={outside}" if outside else "")
        )
        if on_round is not None:
            on_round(record)
        if converged and round_index >= cfg.min_rounds:
            reason = "converged"
            break
        n_t = math.ceil(cfg.growth * n_t)

    if reason == "max_rounds":
        logger.warning(f"run_sequential: stopped after max_rounds={cfg.max_rounds} without meeting both bounds")
    return SequentialResult(policy, dataset, history, reason, t_feas, t_opt)
