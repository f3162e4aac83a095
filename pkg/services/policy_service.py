"""Piecewise linear difference-of-convex (PLDC) policies.

A policy maps a right-hand side b to (x, eta). Training groups solved data
points into cells by the optimal basis of the consolidated master, then fits
per-cell slopes u, v and per-point offsets z with an L1-minimizing LP whose
pairwise inequalities force exact interpolation inside every cell.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linprog
from scipy.sparse import coo_matrix

from services.errors import (
    CmInfeasible,
    DimensionMismatch,
    EmptyBundle,
    EmptyPolicy,
    MasterInfeasible,
    NumericalError,
    TooLarge,
    TrainingInfeasible,
    ValidationError,
)
from services.instance_service import (
    SubproblemSolver,
    TwoStageInstance,
    build_extensive_form,
    first_stage_objective,
)
from services.lshaped_service import (
    Cut,
    LShapedOptions,
    deduplicate_cuts,
    master_lp,
    solve_lshaped,
)
from services.sd_service import SdOptions, build_oos_bundle, solve_sd
from services.simplex_service import (
    LinearProgram,
    LpStatus,
    resolve_with_rhs,
    solve_lp,
)
from utils import json_utils

logger = logging.getLogger("PLDC")

SIMPLEX_BACKEND_MAX_ENTRIES = 100_000


def _serial_map(fn, items):
    return list(map(fn, items))


@dataclass(frozen=True, eq=False)
class TrainingPoint:
    b: np.ndarray
    x_star: np.ndarray
    eta_star: float
    v_star: float
    source: Literal["LShaped", "SD", "LP"] = "LShaped"

    def to_document(self) -> dict:
        return {
            "b": self.b.tolist(),
            "x_star": self.x_star.tolist(),
            "eta_star": self.eta_star,
            "v_star": self.v_star,
            "source": self.source,
        }


@dataclass
class TrainingDataset:
    """Solved right-hand sides plus the cut bundle of the consolidated master.

    An empty bundle means deterministic-LP mode: the master is the plain
    first-stage LP and eta is identically zero.
    """

    c: np.ndarray
    A: np.ndarray
    points: list[TrainingPoint] = field(default_factory=list)
    bundle: list[Cut] = field(default_factory=list)
    infeasible_rhs: int = 0

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).reshape(-1)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, self.c.size)
        for point in self.points:
            self._check(point)

    def __len__(self):
        return len(self.points)

    @property
    def d_x(self) -> int:
        return self.c.size

    @property
    def m1(self) -> int:
        return self.A.shape[0]

    @property
    def rhs_matrix(self) -> np.ndarray:
        return np.vstack([p.b for p in self.points])

    def _check(self, point: TrainingPoint):
        if point.b.size != self.m1 or point.x_star.size != self.d_x:
            raise DimensionMismatch(
                f"training point with b[{point.b.size}] / x[{point.x_star.size}] does not match m1={self.m1}, d_x={self.d_x}"
            )

    def contains(self, b) -> bool:
        b = np.asarray(b, dtype=float)
        return any(np.array_equal(p.b, b) for p in self.points)

    def extend(self, points, cuts=()) -> int:
        """Appends new points (skipping right-hand sides already present) and new cuts."""
        added = 0
        for point in points:
            self._check(point)
            if self.contains(point.b):
                continue
            self.points.append(point)
            added += 1
        self.bundle = deduplicate_cuts(list(self.bundle) + list(cuts))
        return added

    def to_document(self) -> dict:
        return {
            "first_stage": {"c": self.c.tolist(), "A": self.A.tolist()},
            "points": [p.to_document() for p in self.points],
            "bundle": [cut.to_document() for cut in self.bundle],
            "infeasible_rhs": self.infeasible_rhs,
        }

    @classmethod
    def from_document(cls, document: dict) -> "TrainingDataset":
        try:
            first = document["first_stage"]
            points = [
                TrainingPoint(
                    b=np.asarray(p["b"], dtype=float),
                    x_star=np.asarray(p["x_star"], dtype=float),
                    eta_star=float(p["eta_star"]),
                    v_star=float(p["v_star"]),
                    source=p.get("source", "LShaped"),
                )
                for p in document["points"]
            ]
            bundle = [Cut.from_document(c) for c in document.get("bundle", [])]
            return cls(
                c=first["c"],
                A=first["A"],
                points=points,
                bundle=bundle,
                infeasible_rhs=int(document.get("infeasible_rhs", 0)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"malformed dataset document: {e}") from e


def save_dataset(dataset: TrainingDataset, path) -> None:
    json_utils.write_json(path, dataset.to_document())


def load_dataset(path) -> TrainingDataset:
    return TrainingDataset.from_document(json_utils.read_json(path))


@dataclass
class Cell:
    basis_key: tuple
    members: list[int]
    anchor: int
    # consolidated-master optimum (x, eta) of every member, row per member
    targets: np.ndarray = field(repr=False, default=None)


class PolicyOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    relaxed: bool = False
    slack_weight: float = Field(default=1e3, gt=0)
    backend: Literal["auto", "highs", "simplex"] = "auto"
    cell_key: Literal["full", "xeta"] = "full"
    prune: Literal["none", "within_cell_plus_anchor"] = "none"
    max_pairs: int = Field(default=50_000_000, ge=1)
    train_tol: float = Field(default=1e-6, gt=0)


@dataclass
class PLDCPolicy:
    cells: list[Cell]
    u: np.ndarray
    v: np.ndarray
    z: np.ndarray
    anchor_b: np.ndarray
    anchor_y: np.ndarray
    bundle: list[Cut]
    c: np.ndarray
    A: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def num_cells(self) -> int:
        return len(self.cells)

    @property
    def alpha_stack(self) -> np.ndarray:
        return np.array([cut.alpha for cut in self.bundle])

    @property
    def anchor_z(self) -> np.ndarray:
        return self.z[[cell.anchor for cell in self.cells]]


def build_consolidated_master(first_stage, bundle, b) -> LinearProgram:
    """Consolidated master over (x, eta, s) at right-hand side b.

    ``first_stage`` is a (c, A) pair. An empty bundle fixes eta at zero,
    which leaves the plain first-stage LP.
    """
    c, A = first_stage
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.size != np.asarray(A).shape[0]:
        raise DimensionMismatch(f"b has {b.size} entries, A has {np.asarray(A).shape[0]} rows")
    return master_lp(c, A, b, list(bundle), eta_free=bool(bundle))


def _crash_basis(lp: LinearProgram, values: np.ndarray, tol: float = 1e-9) -> tuple[int, ...] | None:
    """Picks num_cons independent columns, positive-valued variables first, then by index."""
    m = lp.num_cons
    free = np.isneginf(lp.var_lower) & np.isposinf(lp.var_upper)
    fixed = lp.var_lower == lp.var_upper
    order = sorted(
        (j for j in range(lp.num_vars) if not fixed[j]),
        key=lambda j: (0 if free[j] else 1 if values[j] > tol else 2, j),
    )
    chosen: list[int] = []
    span = np.zeros((m, 0))
    for j in order:
        a = lp.constraint_matrix[:, j]
        residual = a - span @ (span.T @ a)
        norm = np.linalg.norm(residual)
        if norm > 1e-9 * max(1.0, np.linalg.norm(a)):
            span = np.hstack([span, (residual / norm)[:, None]])
            chosen.append(j)
            if len(chosen) == m:
                return tuple(sorted(chosen))
    return None


def _cm_point_values(dataset: TrainingDataset, point: TrainingPoint) -> np.ndarray:
    surplus = [max(point.eta_star - cut.value(point.x_star), 0.0) for cut in dataset.bundle]
    eta = point.eta_star if dataset.bundle else 0.0
    return np.concatenate([point.x_star, [eta], surplus])


def solve_consolidated_master(dataset: TrainingDataset, index: int):
    """CM solution at point ``index``, warm-started from the point's stored solution."""
    point = dataset.points[index]
    lp = build_consolidated_master((dataset.c, dataset.A), dataset.bundle, point.b)
    hint = _crash_basis(lp, _cm_point_values(dataset, point))
    solution = resolve_with_rhs(lp, lp.rhs, hint)
    if solution.status is LpStatus.INFEASIBLE:
        raise CmInfeasible(f"consolidated master infeasible at training point {index}")
    if solution.status is not LpStatus.OPTIMAL:
        raise NumericalError(f"consolidated master ended {solution.status.value} at training point {index}")
    return solution


def assign_cells(
    dataset: TrainingDataset, cell_key: str = "full", mapper: Callable | None = None
) -> list[Cell]:
    """Groups training points by the optimal basis of the consolidated master.

    Cells are ordered by their lowest member, which is also the anchor.
    """
    if not dataset.points:
        raise ValidationError("cannot assign cells for an empty dataset")
    mapper = mapper or _serial_map
    d_x = dataset.d_x
    solutions = mapper(lambda i: solve_consolidated_master(dataset, i), range(len(dataset)))

    groups: dict[tuple, list[int]] = {}
    targets: dict[int, np.ndarray] = {}
    for i, solution in enumerate(solutions):
        key = solution.basis
        if cell_key == "xeta":
            key = tuple(j for j in key if j <= d_x)
        groups.setdefault(key, []).append(i)
        targets[i] = solution.x[: d_x + 1].copy()

    cells = [
        Cell(basis_key=key, members=members, anchor=members[0], targets=np.vstack([targets[i] for i in members]))
        for key, members in groups.items()
    ]
    cells.sort(key=lambda cell: cell.anchor)
    logger.info(f"assign_cells: {len(dataset)} points → {len(cells)} cells")
    return cells


def cell_affine_ranks(dataset: TrainingDataset, cells: list[Cell]) -> list[int]:
    """Rank of member differences b_i - b_anchor for each cell."""
    ranks = []
    for cell in cells:
        anchor = dataset.points[cell.anchor].b
        diffs = np.array([dataset.points[i].b - anchor for i in cell.members if i != cell.anchor])
        ranks.append(int(np.linalg.matrix_rank(diffs)) if diffs.size else 0)
    return ranks


@dataclass
class TrainingProblem:
    """Training LP split into independent blocks, one per output row.

    Every block shares ``matrix`` (inequality rows ``matrix @ w <= rhs[k]``)
    and ``cost``; only the right-hand side differs between blocks.
    """

    matrix: object
    cost: np.ndarray
    rhs: list[np.ndarray]
    features: np.ndarray
    num_cells: int
    num_points: int
    num_pairs: int
    relaxed: bool

    @property
    def num_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def num_cols(self) -> int:
        return self.matrix.shape[1]

    def offsets(self) -> dict[str, int]:
        L, f, n = self.num_cells, self.features.size, self.num_points
        return {
            "u_plus": 0,
            "u_minus": L * f,
            "v_plus": 2 * L * f,
            "v_minus": 3 * L * f,
            "z_plus": 4 * L * f,
            "z_minus": 4 * L * f + n,
            "slack": 4 * L * f + 2 * n,
        }

    def to_linear_program(self, k: int) -> LinearProgram:
        """Standard form of block k: a slack column per inequality row."""
        dense = self.matrix.toarray()
        rows = self.num_rows
        matrix = np.hstack([dense, np.eye(rows)])
        cost = np.concatenate([self.cost, np.zeros(rows)])
        return LinearProgram(cost, matrix, self.rhs[k], check_rank=False)


def _pairs(cell_of: np.ndarray, anchors: set[int], prune: str) -> tuple[np.ndarray, np.ndarray]:
    n = cell_of.size
    I, J = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    I, J = I.ravel(), J.ravel()
    keep = I != J
    if prune == "within_cell_plus_anchor":
        is_anchor = np.zeros(n, dtype=bool)
        is_anchor[list(anchors)] = True
        keep &= (cell_of[I] == cell_of[J]) | is_anchor[J]
    return I[keep], J[keep]


def _targets(dataset: TrainingDataset, cells: list[Cell]) -> np.ndarray:
    Y = np.zeros((len(dataset), dataset.d_x + 1))
    for cell in cells:
        Y[cell.members] = cell.targets
    return Y


def build_training_lp(dataset: TrainingDataset, cells: list[Cell], opts: PolicyOptions | None = None) -> TrainingProblem:
    """Pairwise inequality system with split variables for the L1 objective.

    For every ordered pair (i, j), i != j, with l the cell of j and each output row k:
        u_l,k (b_i - b_j) + y_j,k + z_j,k <= y_i,k + z_i,k
        v_l,k (b_i - b_j) + z_j,k <= z_i,k
    Right-hand-side components that never vary and the cut-intercept block
    have zero differences, so their u, v columns are left out (fixed to zero).
    In relaxed mode each row gets a penalized slack: lhs - s <= rhs.
    """
    opts = opts or PolicyOptions()
    n, K = len(dataset), dataset.d_x + 1
    B = dataset.rhs_matrix
    features = np.flatnonzero(np.ptp(B, axis=0) > 0.0)
    f, L = features.size, len(cells)

    cell_of = np.empty(n, dtype=int)
    for l, cell in enumerate(cells):
        cell_of[cell.members] = l
    if n * n * K > opts.max_pairs:
        raise TooLarge(f"training problem with {n} points and {K} rows exceeds max_pairs={opts.max_pairs}")
    I, J = _pairs(cell_of, {cell.anchor for cell in cells}, opts.prune)
    P = I.size

    delta = B[I][:, features] - B[J][:, features]
    ell = cell_of[J]
    base = {"u_plus": 0, "u_minus": L * f, "v_plus": 2 * L * f, "v_minus": 3 * L * f}
    z_plus, z_minus, slack0 = 4 * L * f, 4 * L * f + n, 4 * L * f + 2 * n
    num_cols = slack0 + (2 * P if opts.relaxed else 0)

    rows, cols, vals = [], [], []
    pair_rows = np.arange(P)
    for family, (plus, minus) in enumerate((("u_plus", "u_minus"), ("v_plus", "v_minus"))):
        r = pair_rows + family * P
        for q in range(f):
            col = ell * f + q
            nz = delta[:, q] != 0.0
            rows += [r[nz], r[nz]]
            cols += [base[plus] + col[nz], base[minus] + col[nz]]
            vals += [delta[nz, q], -delta[nz, q]]
        ones = np.ones(P)
        rows += [r, r, r, r]
        cols += [z_plus + J, z_minus + J, z_plus + I, z_minus + I]
        vals += [ones, -ones, -ones, ones]
    if opts.relaxed:
        all_rows = np.arange(2 * P)
        rows.append(all_rows)
        cols.append(slack0 + all_rows)
        vals.append(-np.ones(2 * P))

    matrix = coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(2 * P, num_cols)
    ).tocsr()
    cost = np.ones(num_cols)
    if opts.relaxed:
        cost[slack0:] = opts.slack_weight

    Y = _targets(dataset, cells)
    rhs = [np.concatenate([Y[I, k] - Y[J, k], np.zeros(P)]) for k in range(K)]
    logger.info(
        f"build_training_lp: n={n}, cells={L}, features={f}, pairs={P}, rows/block={2 * P}, cols/block={num_cols}"
    )
    return TrainingProblem(
        matrix=matrix,
        cost=cost,
        rhs=rhs,
        features=features,
        num_cells=L,
        num_points=n,
        num_pairs=P,
        relaxed=opts.relaxed,
    )


def _solve_block_highs(problem: TrainingProblem, k: int) -> np.ndarray:
    try:
        result = linprog(
            problem.cost,
            A_ub=problem.matrix,
            b_ub=problem.rhs[k],
            bounds=(0, None),
            method="highs-ds",
            options={"primal_feasibility_tolerance": 1e-9, "dual_feasibility_tolerance": 1e-9},
        )
    except ValueError as e:
        raise NumericalError(f"training LP block {k}: {e}") from e
    if result.status == 2:
        raise TrainingInfeasible(f"training LP block {k} is infeasible")
    if result.status != 0:
        raise NumericalError(f"training LP block {k}: {result.message}")
    return np.asarray(result.x, dtype=float)


def _solve_block_simplex(problem: TrainingProblem, k: int) -> np.ndarray:
    if problem.num_rows == 0:
        return np.zeros(problem.num_cols)
    solution = solve_lp(problem.to_linear_program(k))
    if solution.status is LpStatus.INFEASIBLE:
        raise TrainingInfeasible(f"training LP block {k} is infeasible")
    if solution.status is not LpStatus.OPTIMAL:
        raise NumericalError(f"training LP block {k} ended {solution.status.value}")
    return solution.x[: problem.num_cols]


def _solve_training(problem: TrainingProblem, backend: str) -> list[np.ndarray]:
    if backend == "auto":
        small = problem.num_rows * (problem.num_cols + problem.num_rows) <= SIMPLEX_BACKEND_MAX_ENTRIES
        backend = "simplex" if small else "highs"
    if problem.num_rows == 0:
        return [np.zeros(problem.num_cols) for _ in problem.rhs]
    solve_block = _solve_block_simplex if backend == "simplex" else _solve_block_highs
    return [solve_block(problem, k) for k in range(len(problem.rhs))]


def _policy_from_solution(
    dataset: TrainingDataset,
    cells: list[Cell],
    problem: TrainingProblem,
    solutions: list[np.ndarray],
) -> tuple[PLDCPolicy, float, float]:
    L, n, K = len(cells), len(dataset), dataset.d_x + 1
    width = dataset.m1 + len(dataset.bundle)
    features, f = problem.features, problem.features.size
    off = problem.offsets()
    u = np.zeros((L, K, width))
    v = np.zeros((L, K, width))
    z = np.zeros((n, K))
    max_violation = 0.0
    max_slack = 0.0
    for k, w in enumerate(solutions):
        for l in range(L):
            block = slice(l * f, (l + 1) * f)
            u[l, k, features] = w[off["u_plus"]:][block] - w[off["u_minus"]:][block]
            v[l, k, features] = w[off["v_plus"]:][block] - w[off["v_minus"]:][block]
        z[:, k] = w[off["z_plus"]:off["z_plus"] + n] - w[off["z_minus"]:off["z_minus"] + n]
        if problem.num_rows:
            core = problem.matrix[:, : off["slack"]] @ w[: off["slack"]]
            max_violation = max(max_violation, float(np.max(core - problem.rhs[k], initial=0.0)))
            if problem.relaxed:
                max_slack = max(max_slack, float(np.max(w[off["slack"]:], initial=0.0)))

    Y = _targets(dataset, cells)
    anchors = [cell.anchor for cell in cells]
    policy = PLDCPolicy(
        cells=cells,
        u=u,
        v=v,
        z=z,
        anchor_b=dataset.rhs_matrix[anchors],
        anchor_y=Y[anchors],
        bundle=list(dataset.bundle),
        c=dataset.c.copy(),
        A=dataset.A.copy(),
    )
    return policy, max_violation, max_slack


def _fit(dataset: TrainingDataset, cells: list[Cell], opts: PolicyOptions, kind: str) -> PLDCPolicy:
    problem = build_training_lp(dataset, cells, opts)
    solutions = _solve_training(problem, opts.backend)
    policy, violation, slack = _policy_from_solution(dataset, cells, problem, solutions)

    Y = _targets(dataset, cells)
    outputs = apply_policy_batch(policy, dataset.rhs_matrix)
    recovery = float(np.max(np.abs(outputs - Y))) if len(dataset) else 0.0
    if not opts.relaxed and violation > opts.train_tol:
        logger.warning(f"fit_policy: training constraints violated by {violation:.3e}")
    policy.metadata = {
        "kind": kind,
        "relaxed": opts.relaxed,
        "slack_weight": opts.slack_weight,
        "cells": len(cells),
        "training_size": len(dataset),
        "bundle_size": len(dataset.bundle),
        "max_constraint_violation": violation,
        "max_slack": slack,
        "max_recovery_error": recovery,
        "train_tol": opts.train_tol,
    }
    logger.info(
        f"fit_policy: {kind} with {len(cells)} cells on {len(dataset)} points, "
        f"recovery error {recovery:.3e}, max slack {slack:.3e}"
    )
    return policy


def fit_policy(dataset: TrainingDataset, opts: PolicyOptions | None = None, mapper: Callable | None = None) -> PLDCPolicy:
    """Static procedure: cells from the consolidated master, then the training LP.

    Raises:
        TrainingInfeasible: In plain mode when the pairwise system has no solution;
            callers retry with ``relaxed=True``.
    """
    opts = opts or PolicyOptions()
    cells = assign_cells(dataset, opts.cell_key, mapper)
    return _fit(dataset, cells, opts, "pldc")


def fit_pointwise_baseline(dataset: TrainingDataset, opts: PolicyOptions | None = None, mapper: Callable | None = None) -> PLDCPolicy:
    """Same training LP with one slope block per data point instead of per cell."""
    opts = opts or PolicyOptions()
    cells = assign_cells(dataset, opts.cell_key, mapper)
    singletons = []
    for cell in cells:
        for row, i in enumerate(cell.members):
            singletons.append(Cell(basis_key=cell.basis_key, members=[i], anchor=i, targets=cell.targets[row : row + 1]))
    singletons.sort(key=lambda cell: cell.anchor)
    return _fit(dataset, singletons, opts, "pointwise")


def fit_policy_with_fallback(dataset: TrainingDataset, opts: PolicyOptions | None = None, mapper: Callable | None = None) -> PLDCPolicy:
    """Plain training, retried in relaxed mode when the pairwise system is infeasible."""
    opts = opts or PolicyOptions()
    if opts.relaxed:
        return fit_policy(dataset, opts, mapper)
    try:
        return fit_policy(dataset, opts, mapper)
    except TrainingInfeasible:
        logger.warning("fit_policy: plain training infeasible, retrying relaxed")
        return fit_policy(dataset, opts.model_copy(update={"relaxed": True}), mapper)


def dc_components(policy: PLDCPolicy, rhs_matrix) -> tuple[np.ndarray, np.ndarray]:
    """The two max-of-affine terms at each row of ``rhs_matrix``; the policy is their difference.

    Raises:
        EmptyPolicy: If the policy has no cells.
        DimensionMismatch: If the rows do not have m1 entries.
    """
    if not policy.cells:
        raise EmptyPolicy("policy has no cells")
    B = np.atleast_2d(np.asarray(rhs_matrix, dtype=float))
    m1 = policy.anchor_b.shape[1]
    if B.shape[1] != m1:
        raise DimensionMismatch(f"b has {B.shape[1]} entries, expected {m1}")
    delta = B[:, None, :] - policy.anchor_b[None, :, :]
    z = policy.anchor_z
    convex_part = np.einsum("lkm,nlm->nlk", policy.u[:, :, :m1], delta) + policy.anchor_y + z
    concave_part = np.einsum("lkm,nlm->nlk", policy.v[:, :, :m1], delta) + z
    return convex_part.max(axis=1), concave_part.max(axis=1)


def apply_policy_batch(policy: PLDCPolicy, rhs_matrix) -> np.ndarray:
    """Evaluates the policy at each row of ``rhs_matrix``; returns rows of (x, eta)."""
    convex, concave = dc_components(policy, rhs_matrix)
    return convex - concave


def apply_policy(policy: PLDCPolicy, b) -> tuple[np.ndarray, float]:
    """Returns (x_hat, eta_hat) at right-hand side b."""
    output = apply_policy_batch(policy, np.asarray(b, dtype=float).reshape(1, -1))[0]
    return output[:-1], float(output[-1])


def corrected_objective(policy: PLDCPolicy, x_hat) -> float:
    """c'x plus the largest bundle cut at x; a lower bound on f(x) for exact cuts."""
    if not policy.bundle:
        raise EmptyBundle("policy has no cut bundle")
    x_hat = np.asarray(x_hat, dtype=float)
    return float(policy.c @ x_hat + max(cut.value(x_hat) for cut in policy.bundle))


def feasibility_gap(A, b, x_hat) -> float:
    """Largest violation of Ax = b, x >= 0 at x_hat.

    Args:
        A (array): First-stage matrix.
        b (array): Right-hand side the decision is checked against.
        x_hat (array): First-stage decision, usually a policy output.

    Returns:
        float: max of the equality residual (infinity norm) and the largest negative entry of x_hat.
    """
    A = np.asarray(A, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    residual = float(np.max(np.abs(A @ x_hat - np.asarray(b, dtype=float)), initial=0.0))
    return max(residual, float(max(0.0, -x_hat.min())))


def optimality_gap(value: float, v_star: float, gap: str = "relative") -> float:
    """value - v_star, divided by 1 + |v_star| unless ``gap`` is "absolute"."""
    if gap == "absolute":
        return value - v_star
    return (value - v_star) / (1.0 + abs(v_star))


def policy_to_document(policy: PLDCPolicy) -> dict:
    """JSON-ready form; ``policy_from_document`` reads it back."""
    return {
        "cells": [
            {"basis_key": list(cell.basis_key), "members": list(cell.members), "anchor": cell.anchor}
            for cell in policy.cells
        ],
        "anchors": [
            {"b": b.tolist(), "y": y.tolist()} for b, y in zip(policy.anchor_b, policy.anchor_y)
        ],
        "u": policy.u.tolist(),
        "v": policy.v.tolist(),
        "z": policy.z.tolist(),
        "bundle": [cut.to_document() for cut in policy.bundle],
        "first_stage": {"c": policy.c.tolist(), "A": policy.A.tolist()},
        "metadata": policy.metadata,
    }


def policy_from_document(document: dict) -> PLDCPolicy:
    try:
        cells = [
            Cell(basis_key=tuple(cell["basis_key"]), members=list(cell["members"]), anchor=int(cell["anchor"]))
            for cell in document["cells"]
        ]
        d_x = len(document["first_stage"]["c"])
        m1 = len(document["first_stage"]["A"])
        width = m1 + len(document["bundle"])
        L = len(cells)
        return PLDCPolicy(
            cells=cells,
            u=np.asarray(document["u"], dtype=float).reshape(L, d_x + 1, width),
            v=np.asarray(document["v"], dtype=float).reshape(L, d_x + 1, width),
            z=np.asarray(document["z"], dtype=float).reshape(-1, d_x + 1),
            anchor_b=np.asarray([a["b"] for a in document["anchors"]], dtype=float).reshape(L, m1),
            anchor_y=np.asarray([a["y"] for a in document["anchors"]], dtype=float).reshape(L, d_x + 1),
            bundle=[Cut.from_document(c) for c in document["bundle"]],
            c=np.asarray(document["first_stage"]["c"], dtype=float),
            A=np.asarray(document["first_stage"]["A"], dtype=float).reshape(m1, d_x),
            metadata=dict(document.get("metadata", {})),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ValidationError(f"malformed policy document: {e}") from e


def save_policy(policy: PLDCPolicy, path) -> None:
    json_utils.write_json(path, policy_to_document(policy))


def load_policy(path) -> PLDCPolicy:
    return policy_from_document(json_utils.read_json(path))


def dataset_from_lp(c, A, rhs_list) -> TrainingDataset:
    """Deterministic-LP dataset: plain solves of min c'x, Ax = b, x >= 0."""
    dataset = TrainingDataset(c=c, A=A)
    points = []
    for k, b in enumerate(rhs_list):
        solution = solve_lp(LinearProgram(dataset.c, dataset.A, b, check_rank=False))
        if solution.status is not LpStatus.OPTIMAL:
            logger.warning(f"dataset_from_lp: rhs #{k} is {solution.status.value}, skipped")
            dataset.infeasible_rhs += int(solution.status is LpStatus.INFEASIBLE)
            continue
        points.append(TrainingPoint(np.asarray(b, dtype=float), solution.x, 0.0, solution.objective, "LP"))
    dataset.extend(points)
    return dataset


def solve_points_lshaped(
    inst: TwoStageInstance, rhs_list, opts: LShapedOptions | None = None, mapper: Callable | None = None, tag: str = "ls"
):
    """L-Shaped solve per right-hand side.

    Returns:
        list: (point, active cuts) pairs in input order, with None where b
        leaves the first-stage region infeasible.
    """
    mapper = mapper or _serial_map

    def solve(item):
        k, b = item
        try:
            result = solve_lshaped(inst, b, opts, solve_id=f"{tag}{k}", solver=SubproblemSolver(inst))
        except MasterInfeasible:
            logger.warning(f"solve_points_lshaped: rhs {tag}{k} is outside the first-stage region, skipped")
            return None
        point = TrainingPoint(np.asarray(b, dtype=float), result.x_star, result.eta_star, result.v_star, "LShaped")
        return point, result.cuts_active

    return mapper(solve, list(enumerate(rhs_list)))


def dataset_from_lshaped(
    inst: TwoStageInstance, rhs_list, opts: LShapedOptions | None = None, mapper: Callable | None = None
) -> TrainingDataset:
    """Training data from one L-Shaped solve per right-hand side.

    Args:
        inst (TwoStageInstance): Instance the first stage belongs to.
        rhs_list (list): Right-hand sides to solve at.
        opts (LShapedOptions): Gap tolerance and iteration limit per solve.
        mapper (Callable): Parallel map over the solves; serial when omitted.

    Returns:
        TrainingDataset: Solved points plus the union of active cuts. Right-hand
        sides outside the first-stage region are skipped and counted in
        ``infeasible_rhs``.
    """
    solved = solve_points_lshaped(inst, rhs_list, opts, mapper)
    dataset = TrainingDataset(c=inst.c, A=inst.A, infeasible_rhs=sum(entry is None for entry in solved))
    solved = [entry for entry in solved if entry is not None]
    dataset.extend([p for p, _ in solved], [cut for _, cuts in solved for cut in cuts])
    logger.info(
        f"dataset_from_lshaped: {len(dataset)} points, {len(dataset.bundle)} cuts, "
        f"{dataset.infeasible_rhs} infeasible right-hand sides"
    )
    return dataset


def solve_points_sd(
    inst: TwoStageInstance, rhs_list, opts: SdOptions | None = None, mapper: Callable | None = None, tag: str = "sd"
):
    """SD solve per right-hand side; returns (b, SdResult) pairs in input order, None where b is infeasible."""
    mapper = mapper or _serial_map
    opts = opts or SdOptions()

    def solve(item):
        k, b = item
        try:
            result = solve_sd(inst, b, opts, solve_id=f"{tag}{k}", solver=SubproblemSolver(inst))
        except MasterInfeasible:
            logger.warning(f"solve_points_sd: rhs {tag}{k} is outside the first-stage region, skipped")
            return None
        return np.asarray(b, dtype=float), result

    return mapper(solve, list(enumerate(rhs_list)))


def sd_points(bundle, solved) -> list[TrainingPoint]:
    """Training points from SD incumbents, valued against the out-of-sample bundle."""
    points = []
    for b, result in solved:
        eta = max(cut.value(result.incumbent) for cut in bundle)
        points.append(TrainingPoint(b, result.incumbent, eta, result.value_estimate, "SD"))
    return points


def dataset_from_sd(
    inst: TwoStageInstance,
    rhs_list,
    opts: SdOptions | None = None,
    oos_samples: int = 2000,
    oos_seed: int = 0,
    mapper: Callable | None = None,
) -> TrainingDataset:
    """SD incumbents valued against one out-of-sample bundle of size ``oos_samples``."""
    solved = solve_points_sd(inst, rhs_list, opts, mapper)
    dataset = TrainingDataset(c=inst.c, A=inst.A, infeasible_rhs=sum(entry is None for entry in solved))
    solved = [entry for entry in solved if entry is not None]
    if not solved:
        return dataset
    bundle = build_oos_bundle(inst, [(b, r.incumbent) for b, r in solved], oos_samples, oos_seed)
    dataset.extend(sd_points(bundle, solved), bundle)
    return dataset


@dataclass
class EvaluationRecord:
    b_id: int
    feasible: bool
    feas_gap: float
    rel_opt_gap: float
    wall_micros: int


@dataclass
class EvaluationReport:
    records: list[EvaluationRecord]
    summary: dict


class EvaluationOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    eps_feas: float = Field(default=1e-6, gt=0)
    eps_opt: float = Field(default=5e-4, gt=0)
    gap: Literal["relative", "absolute"] = "relative"
    reference: Literal["lshaped", "extensive"] = "lshaped"
    timing: bool = False


def _reference_optimum(inst, b, k, opts, lshaped_opts, solver) -> float:
    if opts.reference == "extensive":
        reference = solve_lp(build_extensive_form(inst, b))
        if reference.status is LpStatus.INFEASIBLE:
            raise MasterInfeasible(f"extensive form at rhs #{k} is infeasible")
        if reference.status is not LpStatus.OPTIMAL:
            raise NumericalError(f"extensive form at rhs #{k} ended {reference.status.value}")
        return reference.objective
    return solve_lshaped(inst, b, lshaped_opts, solve_id=f"eval{k}", solver=solver).v_star


def evaluate_policy(
    policy: PLDCPolicy,
    inst: TwoStageInstance,
    rhs_list,
    opts: EvaluationOptions | None = None,
    lshaped_opts: LShapedOptions | None = None,
    mapper: Callable | None = None,
) -> EvaluationReport:
    """Feasibility and optimality of the policy at each right-hand side.

    Optimality compares the exact objective at x_hat with the reference
    optimum; infeasible points get a NaN gap.
    """
    opts = opts or EvaluationOptions()
    mapper = mapper or _serial_map
    rhs_list = [np.asarray(b, dtype=float) for b in rhs_list]

    def evaluate(item):
        k, b = item
        started = time.perf_counter_ns()
        x_hat, _ = apply_policy(policy, b)
        elapsed = (time.perf_counter_ns() - started) // 1000 if opts.timing else 0
        gap = feasibility_gap(inst.A, b, x_hat)
        feasible = gap <= opts.eps_feas
        rel_gap = float("nan")
        if feasible:
            solver = SubproblemSolver(inst)
            try:
                v_star = _reference_optimum(inst, b, k, opts, lshaped_opts, solver)
            except MasterInfeasible:
                logger.warning(f"evaluate_policy: rhs #{k} is outside the first-stage region")
                return EvaluationRecord(k, False, float(gap), float("nan"), int(elapsed))
            value = first_stage_objective(inst, x_hat, solver)
            rel_gap = optimality_gap(value, v_star, opts.gap)
        return EvaluationRecord(k, bool(feasible), float(gap), float(rel_gap), int(elapsed))

    records = mapper(evaluate, list(enumerate(rhs_list)))
    feasible = [r for r in records if r.feasible]
    optimal = [r for r in feasible if r.rel_opt_gap <= opts.eps_opt]
    summary = {
        "count": len(records),
        "feasible_pct": 100.0 * len(feasible) / len(records) if records else 0.0,
        "optimal_pct_of_feasible": 100.0 * len(optimal) / len(feasible) if feasible else 0.0,
        "max_feas_gap": max((r.feas_gap for r in records), default=0.0),
        "max_rel_opt_gap": max((r.rel_opt_gap for r in feasible), default=0.0),
    }
    logger.info(
        f"evaluate_policy: {summary['feasible_pct']:.2f}% feasible, "
        f"{summary['optimal_pct_of_feasible']:.2f}% optimal among feasible"
    )
    return EvaluationReport(records=records, summary=summary)
