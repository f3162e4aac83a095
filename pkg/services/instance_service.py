import logging
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.errors import (
    DimensionMismatch,
    ParseError,
    SubproblemInfeasible,
    SubproblemUnbounded,
    ValidationError,
)
from services.simplex_service import LinearProgram, LpStatus, resolve_with_rhs
from utils import json_utils, smps_utils
from utils.random_utils import STREAM_INSTANCE, substream

logger = logging.getLogger("PLDC")

PROBABILITY_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Scenario:
    probability: float
    h: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=float).reshape(-1)
        T = np.array(self.T, dtype=float)
        if T.ndim != 2 or T.shape[0] != h.size:
            raise ValidationError(f"scenario T has shape {T.shape}, expected {h.size} rows")
        if not 0.0 < float(self.probability) <= 1.0:
            raise ValidationError(f"scenario probability {self.probability} outside (0, 1]")
        h.setflags(write=False)
        T.setflags(write=False)
        object.__setattr__(self, "probability", float(self.probability))
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "T", T)


@dataclass(frozen=True, eq=False)
class TwoStageInstance:
    """Two-stage stochastic LP with fixed recourse and a finite scenario set.

    min c'x + sum_w p_w Q(x, w)  s.t.  Ax = b, x >= 0
    Q(x, w) = min q'y  s.t.  Wy = h_w - T_w x, y >= 0
    """

    c: np.ndarray
    A: np.ndarray
    b_nominal: np.ndarray
    q: np.ndarray
    W: np.ndarray
    scenarios: tuple[Scenario, ...]
    perturbed_rows: tuple[int, ...] = ()
    name: str = "instance"

    def __post_init__(self):
        c = np.array(self.c, dtype=float).reshape(-1)
        A = np.array(self.A, dtype=float)
        b = np.array(self.b_nominal, dtype=float).reshape(-1)
        q = np.array(self.q, dtype=float).reshape(-1)
        W = np.array(self.W, dtype=float)
        scenarios = tuple(self.scenarios)

        if A.ndim != 2 or A.shape[1] != c.size:
            raise ValidationError(f"A has shape {A.shape}, expected {c.size} columns")
        if W.ndim != 2 or W.shape[1] != q.size:
            raise ValidationError(f"W has shape {W.shape}, expected {q.size} columns")

        if b.size != A.shape[0]:
            raise ValidationError(f"b has {b.size} entries, A has {A.shape[0]} rows")
        if A.shape[0] > c.size or W.shape[0] > q.size:
            raise ValidationError("more constraints than variables in a stage")
        if not scenarios:
            raise ValidationError("instance needs at least one scenario")
        for k, scenario in enumerate(scenarios):
            if scenario.h.size != W.shape[0] or scenario.T.shape != (W.shape[0], c.size):
                raise ValidationError(
                    f"scenario {k}: h/T shapes {scenario.h.shape}/{scenario.T.shape} "
                    f"do not conform to W {W.shape} and A {A.shape}"
                )
        total = math.fsum(s.probability for s in scenarios)
        if abs(total - 1.0) > PROBABILITY_TOL:
            raise ValidationError(f"scenario probabilities sum to {total!r}, expected 1")
        if A.shape[0] and np.linalg.matrix_rank(A) < A.shape[0]:
            raise ValidationError("first-stage matrix A is rank deficient")
        if W.shape[0] and np.linalg.matrix_rank(W) < W.shape[0]:
            raise ValidationError("recourse matrix W is rank deficient")

        rows = tuple(sorted({int(r) for r in self.perturbed_rows})) or tuple(range(b.size))
        if rows and (rows[0] < 0 or rows[-1] >= b.size):
            raise ValidationError(f"perturbed rows {rows} outside 0..{b.size - 1}")

        for name, value in (("c", c), ("A", A), ("b_nominal", b), ("q", q), ("W", W)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)
        object.__setattr__(self, "scenarios", scenarios)
        object.__setattr__(self, "perturbed_rows", rows)

    @property
    def d_x(self) -> int:
        return self.c.size

    @property
    def m1(self) -> int:
        return self.b_nominal.size

    @property
    def m2(self) -> int:
        return self.W.shape[0]

    @property
    def d_y(self) -> int:
        return self.q.size

    @property
    def num_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([s.probability for s in self.scenarios])

    def first_stage_lp(self, b) -> LinearProgram:
        return LinearProgram(self.c, self.A, b, check_rank=False)


class SyntheticSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d_x: int = Field(gt=0)
    m1: int = Field(gt=0)
    m2: int = Field(default=4, gt=0)
    recourse_columns: int = Field(default=4, gt=0)
    num_scenarios: int = Field(default=16, ge=1)
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_shape(self):
        if self.m1 > self.d_x:
            raise ValueError("m1 must not exceed d_x")
        return self


PRESETS = {
    "pgp2-shape": dict(d_x=4, m1=2, m2=4, recourse_columns=4, num_scenarios=16),
    "cep-shape": dict(d_x=8, m1=5, m2=6, recourse_columns=6, num_scenarios=27),
}


def preset_spec(preset: str, **overrides) -> SyntheticSpec:
    if preset not in PRESETS:
        raise ValidationError(f"unknown preset '{preset}', choose from {sorted(PRESETS)}")
    return SyntheticSpec(**{**PRESETS[preset], **overrides})


def generate_synthetic(spec: SyntheticSpec) -> TwoStageInstance:
    """Builds a random instance with relatively complete, bounded recourse.

    The recourse matrix is W = [W0 | I | -I] with positive costs, so every
    h - Tx is reachable and Q(x, w) >= 0. A is strictly positive, which
    keeps the first-stage region bounded, and b = A x0 with x0 > 0 lies in
    the interior of the cone of A.
    """
    rng = substream(spec.seed, STREAM_INSTANCE)
    d_x, m1, m2, k = spec.d_x, spec.m1, spec.m2, spec.recourse_columns

    A = rng.uniform(0.5, 2.0, size=(m1, d_x))
    x0 = rng.uniform(1.0, 3.0, size=d_x)
    b = A @ x0
    c = rng.uniform(1.0, 4.0, size=d_x)

    W0 = rng.uniform(0.5, 1.5, size=(m2, k))
    W = np.hstack([W0, np.eye(m2), -np.eye(m2)])
    q = np.concatenate(
        [rng.uniform(1.0, 3.0, size=k), rng.uniform(8.0, 12.0, size=m2), rng.uniform(0.5, 1.0, size=m2)]
    )

    T_base = rng.uniform(0.5, 1.5, size=(m2, d_x))
    h_base = T_base @ x0 * rng.uniform(0.9, 1.3, size=m2)
    probability = 1.0 / spec.num_scenarios
    scenarios = []
    for _ in range(spec.num_scenarios):
        h = h_base * (1.0 + 0.3 * rng.uniform(-1.0, 1.0, size=m2))
        T = T_base * (1.0 + 0.1 * rng.uniform(-1.0, 1.0, size=(m2, d_x)))
        scenarios.append(Scenario(probability, h, T))

    inst = TwoStageInstance(
        c=c,
        A=A,
        b_nominal=b,
        q=q,
        W=W,
        scenarios=tuple(scenarios),
        perturbed_rows=tuple(range(m1)),
        name=f"synthetic-{d_x}x{m1}-s{spec.num_scenarios}-seed{spec.seed}",
    )
    logger.info(
        f"generate_synthetic: d_x={d_x}, m1={m1}, m2={m2}, d_y={inst.d_y}, scenarios={spec.num_scenarios}"
    )
    return inst


def mean_value_instance(inst: TwoStageInstance) -> TwoStageInstance:
    """Single-scenario instance with the expected h and T."""
    p = inst.probabilities
    h = sum(pk * s.h for pk, s in zip(p, inst.scenarios))
    T = sum(pk * s.T for pk, s in zip(p, inst.scenarios))
    return TwoStageInstance(
        c=inst.c,
        A=inst.A,
        b_nominal=inst.b_nominal,
        q=inst.q,
        W=inst.W,
        scenarios=(Scenario(1.0, h, T),),
        perturbed_rows=inst.perturbed_rows,
        name=f"{inst.name}-mean-value",
    )


def _require(document: dict, key: str, where: str):
    if not isinstance(document, dict) or key not in document:
        raise ParseError(f"missing field '{where}{key}'")
    return document[key]


def _as_array(value, where: str, ndim: int) -> np.ndarray:
    try:
        array = np.array(value, dtype=float)
    except (TypeError, ValueError) as e:
        raise ParseError(f"field '{where}' is not numeric: {e}") from e
    if array.size == 0 and ndim == 2:
        array = array.reshape(0, 0)
    if array.ndim != ndim:
        raise ParseError(f"field '{where}' must be a {ndim}-d array")
    return array


def instance_from_document(document: dict) -> TwoStageInstance:
    first = _require(document, "first_stage", "")
    second = _require(document, "second_stage", "")
    raw_scenarios = _require(document, "scenarios", "")
    if not isinstance(raw_scenarios, list):
        raise ParseError("field 'scenarios' must be a list")

    c = _as_array(_require(first, "c", "first_stage."), "first_stage.c", 1)
    A = _as_array(_require(first, "A", "first_stage."), "first_stage.A", 2)
    b = _as_array(_require(first, "b", "first_stage."), "first_stage.b", 1)
    q = _as_array(_require(second, "q", "second_stage."), "second_stage.q", 1)
    W = _as_array(_require(second, "W", "second_stage."), "second_stage.W", 2)
    if A.shape[1] != c.size or W.shape[1] != q.size:
        raise ValidationError(f"A {A.shape} / W {W.shape} do not match c and q")

    scenarios = []
    for k, raw in enumerate(raw_scenarios):
        where = f"scenarios[{k}]."
        p = _require(raw, "p", where)
        h = _as_array(_require(raw, "h", where), where + "h", 1)
        T = np.zeros((h.size, c.size))
        for entry in _require(raw, "T_entries", where):
            try:
                row, col, value = int(entry[0]), int(entry[1]), float(entry[2])
            except (TypeError, ValueError, IndexError) as e:
                raise ParseError(f"field '{where}T_entries' has a malformed entry {entry!r}") from e
            if not (0 <= row < h.size and 0 <= col < c.size):
                raise ValidationError(f"{where}T_entries index ({row}, {col}) out of range")
            T[row, col] = value
        if not isinstance(p, (int, float)):
            raise ParseError(f"field '{where}p' is not numeric")
        scenarios.append(Scenario(p, h, T))

    return TwoStageInstance(
        c=c,
        A=A,
        b_nominal=b,
        q=q,
        W=W,
        scenarios=tuple(scenarios),
        perturbed_rows=tuple(first.get("perturbed_rows", ())),
        name=str(document.get("name", "instance")),
    )


def instance_to_document(inst: TwoStageInstance) -> dict:
    scenarios = []
    for s in inst.scenarios:
        rows, cols = np.nonzero(s.T)
        scenarios.append(
            {
                "p": s.probability,
                "h": s.h.tolist(),
                "T_entries": [[int(i), int(j), float(s.T[i, j])] for i, j in zip(rows, cols)],
            }
        )
    return {
        "name": inst.name,
        "first_stage": {
            "c": inst.c.tolist(),
            "A": inst.A.tolist(),
            "b": inst.b_nominal.tolist(),
            "perturbed_rows": list(inst.perturbed_rows),
        },
        "second_stage": {"q": inst.q.tolist(), "W": inst.W.tolist()},
        "scenarios": scenarios,
    }


def load_instance(path) -> TwoStageInstance:
    """Loads a JSON instance, or an SMPS triple given the core file or a common stem."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        document = json_utils.read_json(path)
    else:
        document = smps_utils.read_smps(path)
    inst = instance_from_document(document)
    logger.info(
        f"load_instance: {path.name} → d_x={inst.d_x}, m1={inst.m1}, d_y={inst.d_y}, scenarios={inst.num_scenarios}"
    )
    return inst


def write_instance(inst: TwoStageInstance, path) -> None:
    json_utils.write_json(path, instance_to_document(inst))


def build_extensive_form(inst: TwoStageInstance, b) -> LinearProgram:
    """Deterministic equivalent over (x, y_1, ..., y_S)."""
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.size != inst.m1:
        raise DimensionMismatch(f"b has {b.size} entries, expected {inst.m1}")
    S, d_x, d_y, m1, m2 = inst.num_scenarios, inst.d_x, inst.d_y, inst.m1, inst.m2
    matrix = np.zeros((m1 + S * m2, d_x + S * d_y))
    rhs = np.zeros(m1 + S * m2)
    cost = np.zeros(d_x + S * d_y)
    matrix[:m1, :d_x] = inst.A
    rhs[:m1] = b
    cost[:d_x] = inst.c
    for s, scenario in enumerate(inst.scenarios):
        rows = slice(m1 + s * m2, m1 + (s + 1) * m2)
        cols = slice(d_x + s * d_y, d_x + (s + 1) * d_y)
        matrix[rows, :d_x] = scenario.T
        matrix[rows, cols] = inst.W
        rhs[rows] = scenario.h
        cost[cols] = scenario.probability * inst.q
    # Block triangular with full-rank diagonal blocks.
    return LinearProgram(cost, matrix, rhs, check_rank=False)


@dataclass(frozen=True)
class SubproblemResult:
    value: float
    duals: np.ndarray
    y: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class SampleAverage:
    value: float
    recourse_values: np.ndarray
    std_error: float


class SubproblemSolver:
    """Solves recourse problems for one instance, warm-starting each scenario from its last basis.

    The hint cache is keyed by scenario, and a batch call solves every
    distinct scenario exactly once, so results do not depend on how the
    batch is scheduled across threads.
    """

    def __init__(self, inst: TwoStageInstance, mapper: Callable | None = None):
        self.inst = inst
        self._mapper = mapper or (lambda fn, items: list(map(fn, items)))
        self._lp = LinearProgram(inst.q, inst.W, np.zeros(inst.m2), check_rank=False)
        self._hints: dict[int, tuple[int, ...]] = {}
        self._lock = threading.Lock()
        self.solves = 0

    def solve(self, x, scenario_index: int) -> SubproblemResult:
        scenario = self.inst.scenarios[scenario_index]
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.size != self.inst.d_x:
            raise DimensionMismatch(f"x has {x.size} entries, expected {self.inst.d_x}")
        rhs = scenario.h - scenario.T @ x
        solution = resolve_with_rhs(self._lp, rhs, self._hints.get(scenario_index))
        if solution.status is LpStatus.INFEASIBLE:
            raise SubproblemInfeasible(
                f"recourse problem infeasible for scenario {scenario_index}; instance lacks complete recourse"
            )
        if solution.status is LpStatus.UNBOUNDED:
            raise SubproblemUnbounded(f"recourse problem unbounded for scenario {scenario_index}")
        with self._lock:
            self._hints[scenario_index] = solution.basis
            self.solves += 1
        return SubproblemResult(
            value=float(solution.duals @ rhs), duals=solution.duals, y=solution.x
        )

    def solve_many(self, x, scenario_indices: Iterable[int]) -> list[SubproblemResult]:
        indices = [int(k) for k in scenario_indices]
        distinct = sorted(set(indices))
        results = dict(zip(distinct, self._mapper(lambda k: self.solve(x, k), distinct)))
        return [results[k] for k in indices]


def solve_subproblem(inst: TwoStageInstance, x, scenario_index: int) -> SubproblemResult:
    """Q(x, w) and an optimal dual for one scenario, solved cold."""
    return SubproblemSolver(inst).solve(x, scenario_index)


def first_stage_objective(inst: TwoStageInstance, x, solver: SubproblemSolver | None = None) -> float:
    """c'x plus the exact expected recourse over the finite scenario set."""
    solver = solver or SubproblemSolver(inst)
    x = np.asarray(x, dtype=float).reshape(-1)
    results = solver.solve_many(x, range(inst.num_scenarios))
    values = np.array([r.value for r in results])
    return float(inst.c @ x + inst.probabilities @ values)


def draw_scenarios(inst: TwoStageInstance, count: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. scenario indices drawn with the instance's probabilities."""
    return rng.choice(inst.num_scenarios, size=int(count), p=inst.probabilities)


def sample_average_objective(
    inst: TwoStageInstance, x, sample, solver: SubproblemSolver | None = None
) -> SampleAverage:
    """c'x plus the sample mean of Q(x, w) over ``sample`` (scenario indices)."""
    sample = np.asarray(sample, dtype=int).reshape(-1)
    if sample.size == 0:
        raise ValidationError("sample must not be empty")
    solver = solver or SubproblemSolver(inst)
    x = np.asarray(x, dtype=float).reshape(-1)
    values = np.array([r.value for r in solver.solve_many(x, sample)])
    std_error = float(values.std(ddof=1) / np.sqrt(values.size)) if values.size > 1 else 0.0
    return SampleAverage(
        value=float(inst.c @ x + values.mean()), recourse_values=values, std_error=std_error
    )
