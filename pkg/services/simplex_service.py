import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from itertools import combinations
from math import comb

import numpy as np
from scipy.linalg import LinAlgWarning, lu_factor, lu_solve

from services.errors import (
    ConstructionError,
    DimensionMismatch,
    InfeasibleRhs,
    NumericalError,
    TooLarge,
)

logger = logging.getLogger("PLDC")

TOL_FEAS = 1e-9
TOL_OPT = 1e-9
TOL_PIVOT = 1e-11
REFACTOR_EVERY = 100
BLAND_STALL_FACTOR = 50
MAX_PIVOTS = 200_000
ENUMERATION_MAX_VARS = 12
ENUMERATION_MAX_BASES = 5_000

# Nonbasic positions of a variable.
_BASIC, _AT_LOWER, _AT_UPPER, _FREE = 0, 1, 2, 3


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass(frozen=True, eq=False)
class LinearProgram:
    """min c'x subject to Ax = b, lower <= x <= upper.

    Arrays are copied and frozen at construction. A must have full row rank
    unless ``check_rank`` is disabled by a caller that already knows it does.
    """

    objective: np.ndarray
    constraint_matrix: np.ndarray
    rhs: np.ndarray
    var_lower: np.ndarray | None = None
    var_upper: np.ndarray | None = None
    check_rank: bool = field(default=True, repr=False)

    def __post_init__(self):
        c = np.array(self.objective, dtype=float).reshape(-1)
        n = c.size
        A = np.array(self.constraint_matrix, dtype=float)
        if A.size == 0:
            A = A.reshape(0, n)
        if A.ndim != 2 or A.shape[1] != n:
            raise DimensionMismatch(
                f"constraint matrix shape {A.shape} does not match {n} variables"
            )
        m = A.shape[0]
        b = np.array(self.rhs, dtype=float).reshape(-1)
        if b.size != m:
            raise DimensionMismatch(f"rhs has {b.size} entries, expected {m}")
        lower = (
            np.zeros(n)
            if self.var_lower is None
            else np.array(self.var_lower, dtype=float).reshape(-1)
        )
        upper = (
            np.full(n, np.inf)
            if self.var_upper is None
            else np.array(self.var_upper, dtype=float).reshape(-1)
        )
        if lower.size != n or upper.size != n:
            raise DimensionMismatch("variable bounds must have one entry per variable")
        if m > n:
            raise ConstructionError(f"{m} constraints exceed {n} variables")
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
            raise ConstructionError("LP data must be finite")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)) or np.any(lower > upper):
            raise ConstructionError("variable bounds are inconsistent")
        if np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise ConstructionError("variable bounds are inconsistent")
        if self.check_rank and m > 0 and np.linalg.matrix_rank(A) < m:
            raise ConstructionError("constraint matrix is rank deficient")

        for name, value in (
            ("objective", c),
            ("constraint_matrix", A),
            ("rhs", b),
            ("var_lower", lower),
            ("var_upper", upper),
        ):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def num_vars(self) -> int:
        return self.objective.size

    @property
    def num_cons(self) -> int:
        return self.rhs.size

    def with_rhs(self, new_rhs) -> "LinearProgram":
        new_rhs = np.asarray(new_rhs, dtype=float).reshape(-1)
        if new_rhs.size != self.num_cons:
            raise DimensionMismatch(
                f"rhs has {new_rhs.size} entries, expected {self.num_cons}"
            )
        return LinearProgram(
            self.objective,
            self.constraint_matrix,
            new_rhs,
            self.var_lower,
            self.var_upper,
            check_rank=False,
        )


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: LpStatus
    x: np.ndarray
    objective: float
    basis: tuple[int, ...]
    duals: np.ndarray
    reduced_costs: np.ndarray
    iterations: int = 0

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class _BasisFactor:
    """Dense LU of the basis matrix followed by a product-form eta file."""

    def __init__(self, A: np.ndarray, basis: list[int]):
        self._A = A
        self.refactor(basis)

    def refactor(self, basis: list[int]):
        B = self._A[:, basis]
        with warnings.catch_warnings():
            warnings.simplefilter("error", LinAlgWarning)
            try:
                lu, piv = lu_factor(B)
            except (LinAlgWarning, ValueError, np.linalg.LinAlgError) as e:
                raise NumericalError(f"basis factorization failed: {e}") from e
        diag = np.abs(np.diag(lu))
        if diag.size and diag.min() <= 1e-14 * max(1.0, diag.max()):
            raise NumericalError("basis matrix is numerically singular")
        self._lu = (lu, piv)
        self._etas: list[tuple[int, np.ndarray]] = []

    @property
    def updates(self) -> int:
        return len(self._etas)

    def ftran(self, a: np.ndarray) -> np.ndarray:
        y = lu_solve(self._lu, a)
        for r, d in self._etas:
            yr = y[r] / d[r]
            y -= d * yr
            y[r] = yr
        return y

    def btran(self, c: np.ndarray) -> np.ndarray:
        w = np.array(c, dtype=float)
        for r, d in reversed(self._etas):
            w[r] = (w[r] - d @ w + d[r] * w[r]) / d[r]
        return lu_solve(self._lu, w, trans=1)

    def update(self, r: int, d: np.ndarray):
        self._etas.append((r, d.copy()))


class _Workspace:
    """Private state of one simplex run: basis, nonbasic positions and factor."""

    def __init__(self, A, b, lower, upper, basis, state, x, max_pivots=MAX_PIVOTS):
        self.A = A
        self.b = b
        self.lower = lower
        self.upper = upper
        self.m, self.n = A.shape
        self.basis = list(basis)
        self.state = state
        self.x = x
        self.fixed = lower == upper
        self.free = np.isneginf(lower) & np.isposinf(upper)
        self.pivots = 0
        self.max_pivots = max_pivots
        self._stall = 0
        self.bland = False
        self.factor = _BasisFactor(A, self.basis)
        self.recompute_primal()

    def recompute_primal(self):
        nonbasic = self.state != _BASIC
        residual = self.b - self.A[:, nonbasic] @ self.x[nonbasic]
        xb = self.factor.ftran(residual)
        if not np.all(np.isfinite(xb)):
            self.factor.refactor(self.basis)
            xb = self.factor.ftran(residual)
            if not np.all(np.isfinite(xb)):
                raise NumericalError("non-finite basic solution after refactorization")
        self.x[self.basis] = xb

    def reduced_costs(self, cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        y = self.factor.btran(cost[self.basis])
        return y, cost - self.A.T @ y

    def pivot(self, r: int, q: int, w: np.ndarray, leaving_state: int):
        leaving = self.basis[r]
        self.state[leaving] = leaving_state
        self.x[leaving] = self._bound_value(leaving, leaving_state)
        self.basis[r] = q
        self.state[q] = _BASIC
        self.factor.update(r, w)
        if self.factor.updates >= REFACTOR_EVERY:
            self.factor.refactor(self.basis)
        self._count_pivot()
        self.recompute_primal()

    def flip(self, q: int):
        self.state[q] = _AT_UPPER if self.state[q] == _AT_LOWER else _AT_LOWER
        self.x[q] = self._bound_value(q, self.state[q])
        self._count_pivot()
        self.recompute_primal()

    def note_step(self, step: float):
        if step <= TOL_FEAS:
            self._stall += 1
            if not self.bland and self._stall > BLAND_STALL_FACTOR * max(self.m, 1):
                logger.debug(f"simplex: {self._stall} degenerate pivots, using Bland's rule")
                self.bland = True
        else:
            self._stall = 0
            self.bland = False

    def _bound_value(self, j: int, state: int) -> float:
        if state == _AT_LOWER:
            return self.lower[j]
        if state == _AT_UPPER:
            return self.upper[j]
        return 0.0

    def _count_pivot(self):
        self.pivots += 1
        if self.pivots > self.max_pivots:
            raise NumericalError(f"simplex exceeded {self.max_pivots} pivots")


def _home_state(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    state = np.full(lower.size, _AT_LOWER, dtype=int)
    state[np.isneginf(lower) & np.isfinite(upper)] = _AT_UPPER
    state[np.isneginf(lower) & np.isposinf(upper)] = _FREE
    return state


def _values_for(state, lower, upper) -> np.ndarray:
    x = np.zeros(lower.size)
    x[state == _AT_LOWER] = lower[state == _AT_LOWER]
    x[state == _AT_UPPER] = upper[state == _AT_UPPER]
    return x


def _primal(ws: _Workspace, cost: np.ndarray) -> LpStatus:
    """Primal simplex from a primal feasible basis."""
    while True:
        _, d = ws.reduced_costs(cost)
        movable = ~ws.fixed & (ws.state != _BASIC)
        can_increase = (ws.state == _AT_LOWER) | (ws.state == _FREE)
        can_decrease = (ws.state == _AT_UPPER) | (ws.state == _FREE)
        eligible = movable & (
            (can_increase & (d < -TOL_OPT)) | (can_decrease & (d > TOL_OPT))
        )
        candidates = np.flatnonzero(eligible)
        if candidates.size == 0:
            return LpStatus.OPTIMAL
        if ws.bland:
            q = int(candidates[0])
        else:
            q = int(candidates[np.argmax(np.abs(d[candidates]))])

        direction = 1.0 if d[q] < 0 else -1.0
        w = ws.factor.ftran(ws.A[:, q])
        delta = direction * w
        basis = np.array(ws.basis)
        xb = ws.x[basis]
        ratios = np.full(ws.m, np.inf)
        falling = delta > TOL_PIVOT
        rising = delta < -TOL_PIVOT
        with np.errstate(invalid="ignore"):
            ratios[falling] = (xb[falling] - ws.lower[basis][falling]) / delta[falling]
            ratios[rising] = (ws.upper[basis][rising] - xb[rising]) / -delta[rising]
        ratios = np.maximum(ratios, 0.0)
        flip_length = ws.upper[q] - ws.lower[q]
        t_min = ratios.min() if ws.m else np.inf

        if not np.isfinite(min(t_min, flip_length)):
            return LpStatus.UNBOUNDED
        if flip_length <= t_min:
            ws.note_step(flip_length)
            ws.flip(q)
            continue

        ties = np.flatnonzero(ratios <= t_min + 1e-12)
        if ws.bland:
            r = int(ties[np.argmin(basis[ties])])
        else:
            # largest pivot magnitude, then lowest variable index
            order = np.lexsort((basis[ties], -np.abs(delta[ties])))
            r = int(ties[order[0]])
        ws.note_step(t_min)
        ws.pivot(r, q, w, _AT_LOWER if delta[r] > 0 else _AT_UPPER)


def _dual(ws: _Workspace, cost: np.ndarray) -> LpStatus:
    """Dual simplex from a dual feasible basis."""
    while True:
        basis = np.array(ws.basis)
        xb = ws.x[basis]
        below = ws.lower[basis] - xb
        above = xb - ws.upper[basis]
        violation = np.maximum(below, above)
        rows = np.flatnonzero(violation > TOL_FEAS)
        if rows.size == 0:
            return LpStatus.OPTIMAL
        if ws.bland:
            r = int(rows[np.argmin(basis[rows])])
        else:
            r = int(rows[np.argmax(violation[rows])])
        to_lower = below[r] > 0

        _, d = ws.reduced_costs(cost)
        e_r = np.zeros(ws.m)
        e_r[r] = 1.0
        alpha = ws.A.T @ ws.factor.btran(e_r)
        g = alpha if to_lower else -alpha
        movable = ~ws.fixed & (ws.state != _BASIC)
        eligible = movable & (
            ((ws.state == _AT_LOWER) & (g < -TOL_PIVOT))
            | ((ws.state == _AT_UPPER) & (g > TOL_PIVOT))
            | ((ws.state == _FREE) & (np.abs(g) > TOL_PIVOT))
        )
        candidates = np.flatnonzero(eligible)
        if candidates.size == 0:
            return LpStatus.INFEASIBLE
        slack = np.where(
            ws.state[candidates] == _AT_LOWER,
            np.maximum(d[candidates], 0.0),
            np.where(
                ws.state[candidates] == _AT_UPPER,
                np.maximum(-d[candidates], 0.0),
                np.abs(d[candidates]),
            ),
        )
        ratios = slack / np.abs(g[candidates])
        t_min = ratios.min()
        ties = candidates[ratios <= t_min + 1e-12]
        if ws.bland:
            q = int(ties[0])
        else:
            q = int(ties[np.argmax(np.abs(g[ties]))])
        ws.note_step(t_min)
        w = ws.factor.ftran(ws.A[:, q])
        ws.pivot(r, q, w, _AT_LOWER if to_lower else _AT_UPPER)


def _unconstrained(lp: LinearProgram) -> LpSolution:
    c, lower, upper = lp.objective, lp.var_lower, lp.var_upper
    x = np.zeros(lp.num_vars)
    for j in range(lp.num_vars):
        if c[j] > TOL_OPT:
            x[j] = lower[j]
        elif c[j] < -TOL_OPT:
            x[j] = upper[j]
        else:
            x[j] = lower[j] if np.isfinite(lower[j]) else (upper[j] if np.isfinite(upper[j]) else 0.0)
        if not np.isfinite(x[j]):
            return _non_optimal(lp, LpStatus.UNBOUNDED, 0)
    return LpSolution(
        status=LpStatus.OPTIMAL,
        x=x,
        objective=float(c @ x),
        basis=(),
        duals=np.zeros(0),
        reduced_costs=c.copy(),
        iterations=0,
    )


def _non_optimal(lp: LinearProgram, status: LpStatus, pivots: int) -> LpSolution:
    return LpSolution(
        status=status,
        x=np.full(lp.num_vars, np.nan),
        objective=np.inf if status is LpStatus.INFEASIBLE else -np.inf,
        basis=(),
        duals=np.full(lp.num_cons, np.nan),
        reduced_costs=np.full(lp.num_vars, np.nan),
        iterations=pivots,
    )


def _finish(lp: LinearProgram, ws: _Workspace) -> LpSolution:
    n = lp.num_vars
    cost = np.zeros(ws.n)
    cost[:n] = lp.objective
    y, d = ws.reduced_costs(cost)
    x = ws.x[:n].copy()
    return LpSolution(
        status=LpStatus.OPTIMAL,
        x=x,
        objective=float(lp.objective @ x),
        basis=tuple(sorted(int(j) for j in ws.basis)),
        duals=y,
        reduced_costs=d[:n],
        iterations=ws.pivots,
    )


def _drive_out_artificials(ws: _Workspace, n: int):
    for r in range(ws.m):
        if ws.basis[r] < n:
            continue
        e_r = np.zeros(ws.m)
        e_r[r] = 1.0
        alpha = ws.A[:, :n].T @ ws.factor.btran(e_r)
        alpha[ws.state[:n] == _BASIC] = 0.0
        q = int(np.argmax(np.abs(alpha)))
        if abs(alpha[q]) <= 1e-9:
            raise NumericalError("cannot remove artificial variable from the basis")
        w = ws.factor.ftran(ws.A[:, q])
        ws.pivot(r, q, w, _AT_LOWER)


def solve_lp(lp: LinearProgram, max_pivots: int = MAX_PIVOTS) -> LpSolution:
    """Solves an LP with the two-phase bounded-variable revised simplex method.

    Args:
        lp (LinearProgram): The problem to solve.
        max_pivots (int): Pivot budget; exceeding it raises NumericalError.

    Returns:
        LpSolution: Status, primal point, sorted basis, duals and reduced costs.
    """
    if lp.num_cons == 0:
        return _unconstrained(lp)

    m, n = lp.num_cons, lp.num_vars
    state = _home_state(lp.var_lower, lp.var_upper)
    x = _values_for(state, lp.var_lower, lp.var_upper)
    residual = lp.rhs - lp.constraint_matrix @ x
    signs = np.where(residual < 0, -1.0, 1.0)

    A = np.hstack([lp.constraint_matrix, np.diag(signs)])
    lower = np.concatenate([lp.var_lower, np.zeros(m)])
    upper = np.concatenate([lp.var_upper, np.full(m, np.inf)])
    state = np.concatenate([state, np.full(m, _BASIC)])
    x = np.concatenate([x, np.abs(residual)])
    ws = _Workspace(A, lp.rhs, lower, upper, range(n, n + m), state, x, max_pivots)

    phase_one = np.concatenate([np.zeros(n), np.ones(m)])
    _primal(ws, phase_one)
    infeasibility = float(ws.x[n:].sum())
    if infeasibility > TOL_FEAS * (1.0 + np.abs(lp.rhs).max()):
        logger.debug(f"solve_lp: infeasible, phase-one residual {infeasibility:.3e}")
        return _non_optimal(lp, LpStatus.INFEASIBLE, ws.pivots)

    ws.upper[n:] = 0.0
    ws.fixed = ws.lower == ws.upper
    _drive_out_artificials(ws, n)

    cost = np.concatenate([lp.objective, np.zeros(m)])
    status = _primal(ws, cost)
    if status is LpStatus.UNBOUNDED:
        logger.debug("solve_lp: unbounded")
        return _non_optimal(lp, status, ws.pivots)
    return _finish(lp, ws)


def _warm_workspace(lp: LinearProgram, basis: list[int]) -> tuple[_Workspace, bool]:
    """Builds a workspace on ``basis`` with nonbasic positions chosen to be dual feasible if possible."""
    lower, upper = lp.var_lower, lp.var_upper
    state = _home_state(lower, upper)
    state[basis] = _BASIC
    factor = _BasisFactor(lp.constraint_matrix, basis)
    y = factor.btran(lp.objective[basis])
    d = lp.objective - lp.constraint_matrix.T @ y

    dual_feasible = True
    for j in np.flatnonzero(state != _BASIC):
        if lower[j] == upper[j]:
            state[j] = _AT_LOWER
        elif d[j] > TOL_OPT:
            if np.isfinite(lower[j]):
                state[j] = _AT_LOWER
            else:
                dual_feasible = False
        elif d[j] < -TOL_OPT:
            if np.isfinite(upper[j]):
                state[j] = _AT_UPPER
            else:
                dual_feasible = False
    x = _values_for(state, lower, upper)
    ws = _Workspace(
        np.array(lp.constraint_matrix), lp.rhs, lower.copy(), upper.copy(), basis, state, x
    )
    return ws, dual_feasible


def resolve_with_rhs(lp: LinearProgram, new_rhs, hint_basis=None) -> LpSolution:
    """Solves ``lp`` at a new right-hand side, warm-started from ``hint_basis``.

    A hint that is still primal and dual feasible is returned as is, without pivoting.
    A hint that is only dual feasible is repaired by the dual simplex method.
    """
    target = lp.with_rhs(new_rhs)
    if hint_basis is None or target.num_cons == 0:
        return solve_lp(target)

    basis = sorted({int(j) for j in hint_basis})
    if len(basis) != target.num_cons or basis[0] < 0 or basis[-1] >= target.num_vars:
        logger.debug("resolve_with_rhs: hint basis has the wrong shape, solving cold")
        return solve_lp(target)

    try:
        ws, dual_feasible = _warm_workspace(target, basis)
    except NumericalError:
        logger.debug("resolve_with_rhs: hint basis is singular, solving cold")
        return solve_lp(target)

    xb = ws.x[basis]
    primal_feasible = bool(
        np.all(xb >= target.var_lower[basis] - TOL_FEAS)
        and np.all(xb <= target.var_upper[basis] + TOL_FEAS)
    )
    if primal_feasible and dual_feasible:
        return _finish(target, ws)
    if dual_feasible:
        if _dual(ws, target.objective) is LpStatus.INFEASIBLE:
            return _non_optimal(target, LpStatus.INFEASIBLE, ws.pivots)
        if _primal(ws, target.objective) is LpStatus.UNBOUNDED:
            return _non_optimal(target, LpStatus.UNBOUNDED, ws.pivots)
        return _finish(target, ws)
    if primal_feasible:
        if _primal(ws, target.objective) is LpStatus.UNBOUNDED:
            return _non_optimal(target, LpStatus.UNBOUNDED, ws.pivots)
        return _finish(target, ws)
    return solve_lp(target)


def brute_force_optimum(lp: LinearProgram, tol: float = 1e-9):
    """Vertex enumeration over every column subset of size num_cons.

    Only for nonnegative variables without upper bounds. Returns
    ``(objective, basis)`` with the lexicographically smallest optimal basis,
    or ``None`` when no basis is feasible.
    """
    if np.any(lp.var_lower != 0.0) or np.any(np.isfinite(lp.var_upper)):
        raise ConstructionError("vertex enumeration needs x >= 0 without upper bounds")
    m, n = lp.num_cons, lp.num_vars
    if n > ENUMERATION_MAX_VARS or comb(n, m) > ENUMERATION_MAX_BASES:
        raise TooLarge(f"enumerating C({n},{m}) bases exceeds the oracle limit")
    if m == 0:
        return (0.0, ()) if np.all(lp.objective >= 0) else None

    feasible = []
    for cols in combinations(range(n), m):
        B = lp.constraint_matrix[:, cols]
        if np.linalg.matrix_rank(B) < m:
            continue
        xb = np.linalg.solve(B, lp.rhs)
        if xb.min() >= -tol:
            feasible.append((float(lp.objective[list(cols)] @ xb), cols))
    if not feasible:
        return None
    best = min(value for value, _ in feasible)
    for value, cols in feasible:
        if value <= best + tol * (1.0 + abs(best)):
            return best, tuple(cols)


def enumerate_optimal_bases(lp: LinearProgram, rhs_list) -> list[tuple[int, ...]]:
    """Canonical optimal basis per right-hand side; entry i belongs to ``rhs_list[i]``."""
    if lp.num_vars > ENUMERATION_MAX_VARS or comb(lp.num_vars, lp.num_cons) > ENUMERATION_MAX_BASES:
        raise TooLarge(
            f"enumerating C({lp.num_vars},{lp.num_cons}) bases exceeds the oracle limit"
        )
    bases = []
    for k, rhs in enumerate(rhs_list):
        found = brute_force_optimum(lp.with_rhs(rhs))
        if found is None:
            raise InfeasibleRhs(f"rhs #{k} lies outside the cone of the constraint matrix")
        bases.append(found[1])
    return bases
