import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from services.errors import MasterInfeasible, NumericalError, ValidationError
from services.instance_service import SubproblemSolver, TwoStageInstance
from services.simplex_service import (
    LinearProgram,
    LpSolution,
    LpStatus,
    resolve_with_rhs,
    solve_lp,
)

logger = logging.getLogger("PLDC")


class CutKind(str, Enum):
    EXACT = "Exact"
    SD_IN_SAMPLE = "SdInSample"
    OUT_OF_SAMPLE = "OutOfSample"


@dataclass(frozen=True, eq=False)
class Cut:
    """Affine minorant alpha + beta'x of the expected recourse function."""

    alpha: float
    beta: np.ndarray
    kind: CutKind = CutKind.EXACT
    origin: tuple[str, int] = ("", 0)
    std_error: float | None = None

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).reshape(-1)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "kind", CutKind(self.kind))

    def value(self, x) -> float:
        return float(self.alpha + self.beta @ np.asarray(x, dtype=float))

    def to_document(self) -> dict:
        document = {
            "alpha": self.alpha,
            "beta": self.beta.tolist(),
            "kind": self.kind.value,
            "origin": [self.origin[0], int(self.origin[1])],
        }
        if self.std_error is not None:
            document["std_error"] = self.std_error
        return document

    @classmethod
    def from_document(cls, document: dict) -> "Cut":
        try:
            origin = document.get("origin", ["", 0])
            return cls(
                alpha=document["alpha"],
                beta=document["beta"],
                kind=document.get("kind", CutKind.EXACT.value),
                origin=(str(origin[0]), int(origin[1])),
                std_error=document.get("std_error"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed cut document: {e}") from e


class LShapedOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    tol_gap: float = Field(default=1e-8, gt=0)
    max_iter: int = Field(default=500, ge=1)
    tol_active: float = Field(default=1e-6, gt=0)
    warm_start: bool = False


@dataclass
class LShapedResult:
    x_star: np.ndarray
    eta_star: float
    v_star: float
    cuts_all: list[Cut]
    cuts_active: list[Cut]
    iterations: int
    converged: bool = True
    lower_bounds: list[float] = field(default_factory=list)
    upper_bounds: list[float] = field(default_factory=list)


def master_lp(c, A, b, cuts: list[Cut], eta_free: bool = True) -> LinearProgram:
    """LP over (x, eta, s): Ax = b, -beta_j'x + eta - s_j = alpha_j, x >= 0, s >= 0.

    With ``eta_free`` False the epigraph variable is fixed at zero.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    m1, d_x = A.shape
    J = len(cuts)
    n = d_x + 1 + J
    matrix = np.zeros((m1 + J, n))
    matrix[:m1, :d_x] = A
    for j, cut in enumerate(cuts):
        matrix[m1 + j, :d_x] = -cut.beta
        matrix[m1 + j, d_x] = 1.0
        matrix[m1 + j, d_x + 1 + j] = -1.0
    rhs = np.concatenate([np.asarray(b, dtype=float), [cut.alpha for cut in cuts]])
    cost = np.concatenate([c, [1.0], np.zeros(J)])
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    if eta_free:
        lower[d_x] = -np.inf
    else:
        upper[d_x] = 0.0
    # Rank follows from A and the surplus identity block.
    return LinearProgram(cost, matrix, rhs, lower, upper, check_rank=False)


def aggregate_cut(
    inst: TwoStageInstance, x, solver: SubproblemSolver | None = None, origin: tuple[str, int] = ("", 0)
) -> Cut:
    """Exact single cut at x: alpha = sum p pi'h, beta = -sum p T'pi."""
    solver = solver or SubproblemSolver(inst)
    x = np.asarray(x, dtype=float)
    results = solver.solve_many(x, range(inst.num_scenarios))
    alpha = 0.0
    beta = np.zeros(inst.d_x)
    for p, scenario, result in zip(inst.probabilities, inst.scenarios, results):
        alpha += p * float(result.duals @ scenario.h)
        beta -= p * (scenario.T.T @ result.duals)
    return Cut(alpha=alpha, beta=beta, kind=CutKind.EXACT, origin=origin)


def initial_candidate(inst: TwoStageInstance, b: np.ndarray) -> np.ndarray:
    solution = solve_lp(inst.first_stage_lp(b))
    if solution.status is LpStatus.INFEASIBLE:
        raise MasterInfeasible("first-stage constraints are infeasible at this b")
    if solution.status is LpStatus.UNBOUNDED:
        solution = solve_lp(LinearProgram(np.zeros(inst.d_x), inst.A, b, check_rank=False))
    return solution.x


def _solve_master(lp: LinearProgram, hint) -> LpSolution:
    solution = resolve_with_rhs(lp, lp.rhs, hint) if hint is not None else solve_lp(lp)
    if solution.status is LpStatus.INFEASIBLE:
        raise MasterInfeasible("master problem is infeasible")
    if solution.status is LpStatus.UNBOUNDED:
        raise NumericalError("master problem is unbounded; first-stage region is not bounded")
    return solution


def solve_lshaped(
    inst: TwoStageInstance,
    b,
    opts: LShapedOptions | None = None,
    solve_id: str = "lshaped",
    solver: SubproblemSolver | None = None,
) -> LShapedResult:
    """Single-cut L-Shaped method at right-hand side ``b``.

    Stops when the best exact objective and the master bound are within
    ``tol_gap * (1 + |lower|)``. The returned point is the last master
    candidate, so eta_star is its exact expected recourse.

    Raises:
        MasterInfeasible: If b is outside the cone of A.
    """
    opts = opts or LShapedOptions()
    solver = solver or SubproblemSolver(inst)
    b = np.asarray(b, dtype=float).reshape(-1)

    x = initial_candidate(inst, b)
    cuts: list[Cut] = []
    lower_bounds: list[float] = []
    upper_bounds: list[float] = []
    best = None
    lower = None
    hint = None
    converged = False
    iteration = 0

    for iteration in range(1, opts.max_iter + 1):
        cut = aggregate_cut(inst, x, solver, origin=(solve_id, iteration))
        cuts.append(cut)
        recourse = cut.value(x)
        upper = float(inst.c @ x) + recourse
        upper_bounds.append(upper)
        if best is None or upper < best[0]:
            best = (upper, x, recourse)
        if lower is not None and upper - lower <= opts.tol_gap * (1.0 + abs(lower)):
            best = (upper, x, recourse)
            converged = True
            break

        lp = master_lp(inst.c, inst.A, b, cuts)
        master = _solve_master(lp, hint)
        new_lower = master.objective
        if lower is not None and new_lower < lower - 1e-9 * (1.0 + abs(lower)):
            logger.warning(f"solve_lshaped: master bound decreased from {lower} to {new_lower}")
        lower = new_lower
        lower_bounds.append(lower)
        x = master.x[: inst.d_x].copy()
        if opts.warm_start:
            hint = tuple(master.basis) + (inst.d_x + len(cuts) + 1,)

    if not converged:
        logger.warning(f"solve_lshaped: {solve_id} hit max_iter={opts.max_iter} without closing the gap")

    v_star, x_star, eta_star = best
    active = [cut for cut in cuts if eta_star - cut.value(x_star) <= opts.tol_active]
    logger.debug(
        f"solve_lshaped: {solve_id} v*={v_star:.10g} iterations={iteration} cuts={len(cuts)} active={len(active)}"
    )
    return LShapedResult(
        x_star=np.asarray(x_star, dtype=float),
        eta_star=eta_star,
        v_star=v_star,
        cuts_all=cuts,
        cuts_active=active,
        iterations=iteration,
        converged=converged,
        lower_bounds=lower_bounds,
        upper_bounds=upper_bounds,
    )


def deduplicate_cuts(cuts, tol: float = 1e-12) -> list[Cut]:
    """Drops cuts whose intercept and slope match an earlier cut within ``tol``."""
    kept: list[Cut] = []
    for cut in cuts:
        if not any(
            abs(cut.alpha - other.alpha) <= tol and np.all(np.abs(cut.beta - other.beta) <= tol)
            for other in kept
        ):
            kept.append(cut)
    return kept
