"""Simplified stochastic decomposition and out-of-sample cuts.

One scenario is drawn per iteration and solved exactly at the candidate;
all other observations are priced by the best stored dual vertex. Cuts
formed at iteration j are kept raw and rescaled by j/k on use, which
equals applying the (k-1)/k update once per iteration, with the recourse
lower bound filling the remainder. That bound must hold for every scenario
over the whole first-stage region, so a requested bound above the recourse
floor is rejected.
"""

import logging
from dataclasses import dataclass, field

import cvxpy as cp
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.errors import MasterInfeasible, NumericalError, ValidationError
from services.instance_service import (
    SubproblemSolver,
    TwoStageInstance,
    draw_scenarios,
)
from services.lshaped_service import Cut, CutKind, initial_candidate, deduplicate_cuts
from services.simplex_service import LinearProgram, LpStatus, solve_lp
from utils.random_utils import STREAM_OOS, STREAM_SD, substream

logger = logging.getLogger("PLDC")


class SdOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    sigma_reg: float = Field(default=1.0, gt=0)
    min_iter: int = Field(default=100, ge=1)
    max_iter: int = Field(default=1000, ge=1)
    stall_tol: float = Field(default=1e-4, gt=0)
    stall_window: int = Field(default=50, ge=1)
    gamma: float = Field(default=0.2, gt=0, lt=1)
    # None derives the bound from the instance
    lower_bound: float | None = None
    tol_active: float = Field(default=1e-6, gt=0)
    seed: int = Field(default=0, ge=0)


@dataclass
class SdResult:
    incumbent: np.ndarray
    value_estimate: float
    cuts_active: list[Cut]
    dual_vertices: list[np.ndarray]
    observations: list[int]
    iterations: int
    objective_trajectory: list[float] = field(default_factory=list)
    descent_checks: list[bool] = field(default_factory=list)
    exact_solves: int = 0


@dataclass
class _RawCut:
    alpha: float
    beta: np.ndarray
    created: int


class _DualVertexStore:
    """Distinct dual vertices in discovery order."""

    def __init__(self, m2: int):
        self._vertices = np.zeros((0, m2))

    def __len__(self):
        return self._vertices.shape[0]

    def add(self, pi: np.ndarray) -> bool:
        if len(self) and np.any(np.all(np.abs(self._vertices - pi) <= 1e-9, axis=1)):
            return False
        self._vertices = np.vstack([self._vertices, pi])
        return True

    def best(self, rhs: np.ndarray) -> np.ndarray:
        # argmax returns the lowest vertex index on ties
        return self._vertices[int(np.argmax(self._vertices @ rhs))]

    def as_list(self) -> list[np.ndarray]:
        return [v.copy() for v in self._vertices]


def _form_cut(inst: TwoStageInstance, x: np.ndarray, counts: dict[int, int], k: int, vertices) -> _RawCut:
    alpha = 0.0
    beta = np.zeros(inst.d_x)
    for s in sorted(counts):
        scenario = inst.scenarios[s]
        pi = vertices.best(scenario.h - scenario.T @ x)
        alpha += counts[s] * float(pi @ scenario.h)
        beta -= counts[s] * (scenario.T.T @ pi)
    return _RawCut(alpha / k, beta / k, k)


def _scaled(cuts: list[_RawCut], k: int, lower_bound: float) -> tuple[np.ndarray, np.ndarray]:
    weights = np.array([cut.created / k for cut in cuts])
    alphas = weights * np.array([cut.alpha for cut in cuts]) + (1.0 - weights) * lower_bound
    betas = weights[:, None] * np.vstack([cut.beta for cut in cuts])
    return alphas, betas


def _model(c, alphas, betas, x) -> float:
    return float(c @ x + np.max(alphas + betas @ x))


def recourse_floor(inst: TwoStageInstance, b) -> float:
    """min over scenarios w and first-stage x with Ax = b, x >= 0 of Q(x, w).

    Raises:
        MasterInfeasible: If no first-stage decision at b has feasible recourse.
        ValidationError: If some scenario's recourse is unbounded below.
    """
    b = np.asarray(b, dtype=float).reshape(-1)
    d_x, m1 = inst.d_x, inst.m1
    matrix = np.zeros((m1 + inst.m2, d_x + inst.d_y))
    matrix[:m1, :d_x] = inst.A
    matrix[m1:, d_x:] = inst.W
    cost = np.concatenate([np.zeros(d_x), inst.q])
    floor = np.inf
    for s, scenario in enumerate(inst.scenarios):
        matrix[m1:, :d_x] = scenario.T
        solution = solve_lp(LinearProgram(cost, matrix, np.concatenate([b, scenario.h]), check_rank=False))
        if solution.status is LpStatus.INFEASIBLE:
            raise MasterInfeasible(f"no first-stage decision has feasible recourse in scenario {s}")
        if solution.status is LpStatus.UNBOUNDED:
            raise ValidationError(f"recourse of scenario {s} is unbounded below on the first-stage region")
        if solution.status is not LpStatus.OPTIMAL:
            raise NumericalError(f"recourse floor LP of scenario {s} ended {solution.status.value}")
        floor = min(floor, solution.objective)
    return float(floor)


def resolve_lower_bound(inst: TwoStageInstance, b, requested: float | None = None) -> float:
    """Lower bound mixed into aged SD cuts.

    Nonnegative recourse costs give Q >= 0, so 0 is used without solving
    anything. Otherwise the recourse floor is computed, and a requested
    bound must not exceed it.

    Raises:
        ValidationError: If ``requested`` is above the recourse floor.
    """
    if requested is None and np.all(inst.q >= 0.0):
        return 0.0
    floor = recourse_floor(inst, b)
    if requested is None:
        return floor
    if requested > floor + 1e-9 * (1.0 + abs(floor)):
        raise ValidationError(f"SD lower_bound {requested:g} exceeds the recourse floor {floor:.8g} at this b")
    return float(requested)


def _proximal_master(inst, b, alphas, betas, incumbent, sigma):
    x = cp.Variable(inst.d_x, nonneg=True)
    eta = cp.Variable()
    problem = cp.Problem(
        cp.Minimize(inst.c @ x + eta + (sigma / 2.0) * cp.sum_squares(x - incumbent)),
        [inst.A @ x == b, eta >= alphas + betas @ x],
    )
    try:
        problem.solve(solver=cp.CLARABEL)
    except cp.SolverError as e:
        raise NumericalError(f"regularized master: {e}") from e
    if problem.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE):
        raise MasterInfeasible("regularized master is infeasible")
    if problem.status not in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
        raise NumericalError(f"regularized master ended with status {problem.status}")
    return np.maximum(np.asarray(x.value, dtype=float), 0.0), float(problem.value)


def solve_sd(
    inst: TwoStageInstance,
    b,
    opts: SdOptions | None = None,
    solve_id: str = "sd",
    solver: SubproblemSolver | None = None,
) -> SdResult:
    """Regularized stochastic decomposition at right-hand side ``b``.

    Args:
        inst (TwoStageInstance): Instance whose scenarios are sampled with replacement.
        b (array): First-stage right-hand side.
        opts (SdOptions): Proximal weight, iteration limits, stall rule and seed.
        solve_id (str): Tag stored in the origin of every cut.
        solver (SubproblemSolver): Optional shared recourse solver.

    Returns:
        SdResult: Incumbent, in-sample estimate, active cuts and sampling record.

    Raises:
        MasterInfeasible: If b is outside the cone of A.
        ValidationError: If opts.lower_bound exceeds the recourse floor at b.
        NumericalError: If the regularized master solve fails.
    """
    opts = opts or SdOptions()
    solver = solver or SubproblemSolver(inst)
    b = np.asarray(b, dtype=float).reshape(-1)
    rng = substream(opts.seed, STREAM_SD)

    incumbent = initial_candidate(inst, b)
    lower_bound = resolve_lower_bound(inst, b, opts.lower_bound)
    candidate = incumbent.copy()
    vertices = _DualVertexStore(inst.m2)
    counts: dict[int, int] = {}
    observations: list[int] = []
    bundle: list[_RawCut] = []
    incumbent_cut: _RawCut | None = None
    predicted = None
    trajectory: list[float] = []
    descent_checks: list[bool] = []
    exact_solves = 0
    k = 0

    for k in range(1, opts.max_iter + 1):
        omega = int(draw_scenarios(inst, 1, rng)[0])
        observations.append(omega)
        counts[omega] = counts.get(omega, 0) + 1
        vertices.add(solver.solve(candidate, omega).duals)
        exact_solves += 1

        candidate_cut = _form_cut(inst, candidate, counts, k, vertices)
        refreshed = _form_cut(inst, incumbent, counts, k, vertices)
        bundle = [cut for cut in bundle if cut is not incumbent_cut]
        bundle += [candidate_cut, refreshed]
        incumbent_cut = refreshed

        alphas, betas = _scaled(bundle, k, lower_bound)
        if predicted is not None and predicted < 0.0:
            gain = _model(inst.c, alphas, betas, candidate) - _model(inst.c, alphas, betas, incumbent)
            if gain < opts.gamma * predicted:
                incumbent = candidate.copy()
                bundle = [cut for cut in bundle if cut is not refreshed]
                incumbent_cut = candidate_cut
                alphas, betas = _scaled(bundle, k, lower_bound)

        incumbent_value = _model(inst.c, alphas, betas, incumbent)
        trajectory.append(incumbent_value)

        candidate, master_value = _proximal_master(inst, b, alphas, betas, incumbent, opts.sigma_reg)
        descent_checks.append(master_value <= incumbent_value + 1e-6 * (1.0 + abs(incumbent_value)))
        predicted = _model(inst.c, alphas, betas, candidate) - incumbent_value

        # keep cuts tight at the new candidate plus the incumbent cut
        slack = np.max(alphas + betas @ candidate) - (alphas + betas @ candidate)
        bundle = [
            cut for cut, gap in zip(bundle, slack) if gap <= opts.tol_active or cut is incumbent_cut
        ]

        if k >= max(opts.min_iter, opts.stall_window + 1):
            previous = trajectory[-opts.stall_window - 1]
            if abs(incumbent_value - previous) < opts.stall_tol * (1.0 + abs(incumbent_value)):
                break

    alphas, betas = _scaled(bundle, k, lower_bound)
    values = alphas + betas @ incumbent
    top = values.max()
    active = [
        Cut(alpha=a, beta=beta, kind=CutKind.SD_IN_SAMPLE, origin=(solve_id, cut.created))
        for a, beta, cut, v in zip(alphas, betas, bundle, values)
        if top - v <= opts.tol_active
    ]
    value_estimate = float(inst.c @ incumbent + top)
    logger.debug(
        f"solve_sd: {solve_id} iterations={k} estimate={value_estimate:.8g} "
        f"vertices={len(vertices)} active={len(active)}"
    )
    return SdResult(
        incumbent=incumbent,
        value_estimate=value_estimate,
        cuts_active=deduplicate_cuts(active),
        dual_vertices=vertices.as_list(),
        observations=observations,
        iterations=k,
        objective_trajectory=trajectory,
        descent_checks=descent_checks,
        exact_solves=exact_solves,
    )


def out_of_sample_cut(
    inst: TwoStageInstance,
    x_hat,
    sample,
    solver: SubproblemSolver | None = None,
    origin: tuple[str, int] = ("oos", 0),
) -> Cut:
    """Sample-average cut at x_hat with the exact duals of every observation.

    The duals are fixed, so by weak duality the cut lower-bounds the sample
    average recourse at every x, not only at x_hat.
    """
    sample = np.asarray(sample, dtype=int).reshape(-1)
    if sample.size == 0:
        raise ValidationError("out-of-sample cut needs a nonempty sample")
    solver = solver or SubproblemSolver(inst)
    x_hat = np.asarray(x_hat, dtype=float)
    results = solver.solve_many(x_hat, sample)
    alpha = 0.0
    beta = np.zeros(inst.d_x)
    for s, result in zip(sample, results):
        scenario = inst.scenarios[s]
        alpha += float(result.duals @ scenario.h)
        beta -= scenario.T.T @ result.duals
    values = np.array([r.value for r in results])
    std_error = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return Cut(
        alpha=alpha / sample.size,
        beta=beta / sample.size,
        kind=CutKind.OUT_OF_SAMPLE,
        origin=origin,
        std_error=std_error,
    )


def build_oos_bundle(
    inst: TwoStageInstance,
    incumbents,
    N: int,
    seed: int,
    solver: SubproblemSolver | None = None,
) -> list[Cut]:
    """One out-of-sample cut per distinct incumbent, all on one shared sample of size N."""
    if N < 1:
        raise ValidationError("out-of-sample size N must be at least 1")
    solver = solver or SubproblemSolver(inst)
    sample = draw_scenarios(inst, N, substream(seed, STREAM_OOS))
    cuts = []
    seen: list[np.ndarray] = []
    for i, (_, x_hat) in enumerate(incumbents):
        x_hat = np.asarray(x_hat, dtype=float)
        if any(np.all(np.abs(x_hat - other) <= 1e-12) for other in seen):
            continue
        seen.append(x_hat)
        cuts.append(out_of_sample_cut(inst, x_hat, sample, solver, origin=("oos", i)))
    bundle = deduplicate_cuts(cuts)
    logger.info(f"build_oos_bundle: {len(bundle)} cuts from {len(incumbents)} incumbents, N={N}")
    return bundle
