"""Reader for a two-stage subset of SMPS.

Supported: CORE in free MPS (ROWS with N/E/L/G, COLUMNS, RHS, empty
BOUNDS/RANGES), TIME with PERIODS given as first column/first row of each
stage, and STOCH with INDEP DISCRETE blocks on RHS entries and on
technology-matrix coefficients. Scenarios are the cross product of the
independent entries. L and G rows gain slack columns so every stage is in
equality form.
"""

import itertools
import logging
from pathlib import Path

import numpy as np

from services.errors import ParseError

logger = logging.getLogger("PLDC")

_CORE_SUFFIXES = (".cor", ".core")
_TIME_SUFFIXES = (".tim", ".time")
_STOCH_SUFFIXES = (".sto", ".stoch")


def _find(stem: Path, suffixes) -> Path:
    for suffix in suffixes:
        for candidate in (stem.with_suffix(suffix), stem.with_suffix(suffix.upper())):
            if candidate.exists():
                return candidate
    raise ParseError(f"{stem}: no file with suffix {'/'.join(suffixes)}")


def _records(path: Path):
    """Yields (line number, tokens, is_section_header) for meaningful lines."""
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ParseError(f"{path}: cannot read file: {e}") from e
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.lstrip().startswith("*"):
            continue
        yield lineno, line.split(), not line[0].isspace()


def _number(token: str, path: Path, lineno: int) -> float:
    try:
        return float(token)
    except ValueError as e:
        raise ParseError(f"{path}:{lineno}: expected a number, got '{token}'") from e


def _read_core(path: Path):
    rows: dict[str, str] = {}
    row_order: list[str] = []
    objective_row = None
    columns: dict[str, dict[str, float]] = {}
    column_order: list[str] = []
    rhs: dict[str, float] = {}
    section = None

    for lineno, tokens, header in _records(path):
        if header:
            section = tokens[0].upper()
            if section not in ("NAME", "ROWS", "COLUMNS", "RHS", "BOUNDS", "RANGES", "ENDATA"):
                raise ParseError(f"{path}:{lineno}: unknown section '{tokens[0]}'")
            continue
        if section == "ROWS":
            if len(tokens) != 2 or tokens[0].upper() not in ("N", "E", "L", "G"):
                raise ParseError(f"{path}:{lineno}: malformed ROWS record")
            kind, name = tokens[0].upper(), tokens[1]
            if kind == "N":
                objective_row = objective_row or name
                continue
            rows[name] = kind
            row_order.append(name)
        elif section == "COLUMNS":
            if "'MARKER'" in tokens:
                raise ParseError(f"{path}:{lineno}: integer markers are not supported")
            if len(tokens) not in (3, 5):
                raise ParseError(f"{path}:{lineno}: malformed COLUMNS record")
            column = tokens[0]
            if column not in columns:
                columns[column] = {}
                column_order.append(column)
            for row, value in zip(tokens[1::2], tokens[2::2]):
                if row != objective_row and row not in rows:
                    raise ParseError(f"{path}:{lineno}: unknown row '{row}'")
                columns[column][row] = _number(value, path, lineno)
        elif section == "RHS":
            if len(tokens) not in (3, 5):
                raise ParseError(f"{path}:{lineno}: malformed RHS record")
            for row, value in zip(tokens[1::2], tokens[2::2]):
                if row not in rows:
                    if row == objective_row:
                        continue
                    raise ParseError(f"{path}:{lineno}: unknown row '{row}'")
                rhs[row] = _number(value, path, lineno)
        elif section in ("BOUNDS", "RANGES"):
            raise ParseError(f"{path}:{lineno}: {section} section is not supported")
        elif section is None:
            raise ParseError(f"{path}:{lineno}: data before the first section")

    if objective_row is None:
        raise ParseError(f"{path}: no objective (N) row")
    return rows, row_order, objective_row, columns, column_order, rhs


def _read_time(path: Path):
    starts = []
    section = None
    for lineno, tokens, header in _records(path):
        if header:
            section = tokens[0].upper()
            continue
        if section == "PERIODS":
            if len(tokens) < 3:
                raise ParseError(f"{path}:{lineno}: malformed PERIODS record")
            starts.append((tokens[0], tokens[1]))
    if len(starts) != 2:
        raise ParseError(f"{path}: expected exactly two periods, found {len(starts)}")
    return starts[1]


def _read_stoch(path: Path):
    blocks: dict[tuple[str, str], list[tuple[float, float]]] = {}
    section = None
    for lineno, tokens, header in _records(path):
        if header:
            section = tokens[0].upper()
            if section == "INDEP" and (len(tokens) < 2 or tokens[1].upper() != "DISCRETE"):
                raise ParseError(f"{path}:{lineno}: only INDEP DISCRETE is supported")
            if section not in ("STOCH", "INDEP", "ENDATA"):
                raise ParseError(f"{path}:{lineno}: section '{tokens[0]}' is not supported")
            continue
        if section != "INDEP":
            raise ParseError(f"{path}:{lineno}: data outside an INDEP section")
        if len(tokens) not in (4, 5):
            raise ParseError(f"{path}:{lineno}: malformed INDEP record")
        column, row = tokens[0], tokens[1]
        value = _number(tokens[2], path, lineno)
        probability = _number(tokens[-1], path, lineno)
        blocks.setdefault((column, row), []).append((value, probability))
    return blocks


def read_smps(path) -> dict:
    """Reads an SMPS triple into the JSON instance document layout."""
    stem = Path(path)
    core_path = stem if stem.suffix.lower() in _CORE_SUFFIXES else _find(stem, _CORE_SUFFIXES)
    time_path = _find(core_path, _TIME_SUFFIXES)
    stoch_path = _find(core_path, _STOCH_SUFFIXES)

    rows, row_order, objective_row, columns, column_order, rhs = _read_core(core_path)
    second_column, second_row = _read_time(time_path)
    if second_column not in columns or second_row not in rows:
        raise ParseError(f"{time_path}: period start '{second_column}/{second_row}' not in core")
    split_col = column_order.index(second_column)
    split_row = row_order.index(second_row)
    stage1_rows, stage2_rows = row_order[:split_row], row_order[split_row:]
    stage1_cols, stage2_cols = column_order[:split_col], column_order[split_col:]

    for column in stage2_cols:
        for row in columns[column]:
            if row in stage1_rows:
                raise ParseError(f"{core_path}: second-stage column '{column}' appears in first-stage row '{row}'")

    def stage_matrices(stage_rows, own_cols):
        slack_cols = [r for r in stage_rows if rows[r] in ("L", "G")]
        n_cols = len(own_cols) + len(slack_cols)
        matrix = np.zeros((len(stage_rows), n_cols))
        cost = np.zeros(n_cols)
        for j, column in enumerate(own_cols):
            cost[j] = columns[column].get(objective_row, 0.0)
            for i, row in enumerate(stage_rows):
                matrix[i, j] = columns[column].get(row, 0.0)
        for k, row in enumerate(slack_cols):
            matrix[stage_rows.index(row), len(own_cols) + k] = 1.0 if rows[row] == "L" else -1.0
        return matrix, cost

    A, c = stage_matrices(stage1_rows, stage1_cols)
    W, q = stage_matrices(stage2_rows, stage2_cols)
    T = np.zeros((len(stage2_rows), A.shape[1]))
    for j, column in enumerate(stage1_cols):
        for i, row in enumerate(stage2_rows):
            T[i, j] = columns[column].get(row, 0.0)
    b = np.array([rhs.get(r, 0.0) for r in stage1_rows])
    h = np.array([rhs.get(r, 0.0) for r in stage2_rows])

    blocks = _read_stoch(stoch_path)
    entries = []
    for (column, row), realizations in blocks.items():
        if row not in stage2_rows:
            raise ParseError(f"{stoch_path}: random entry in non-recourse row '{row}'")
        total = sum(p for _, p in realizations)
        if abs(total - 1.0) > 1e-9:
            raise ParseError(f"{stoch_path}: probabilities of '{column}/{row}' sum to {total}")
        i = stage2_rows.index(row)
        if column in columns:
            if column not in stage1_cols:
                raise ParseError(f"{stoch_path}: random recourse entry '{column}/{row}' is not supported")
            entries.append(("T", i, stage1_cols.index(column), realizations))
        else:
            entries.append(("h", i, None, realizations))

    scenarios = []
    for combination in itertools.product(*(e[3] for e in entries)):
        h_s, T_s, p = h.copy(), T.copy(), 1.0
        for (target, i, j, _), (value, probability) in zip(entries, combination):
            if target == "h":
                h_s[i] = value
            else:
                T_s[i, j] = value
            p *= probability
        rows_nz, cols_nz = np.nonzero(T_s)
        scenarios.append(
            {
                "p": p,
                "h": h_s.tolist(),
                "T_entries": [[int(r), int(k), float(T_s[r, k])] for r, k in zip(rows_nz, cols_nz)],
            }
        )
    # Products of rounded probabilities drift from 1 by a few ulps.
    total = sum(s["p"] for s in scenarios)
    for s in scenarios:
        s["p"] = s["p"] / total

    logger.info(f"read_smps: {core_path.name} → {len(scenarios)} scenarios from {len(entries)} random entries")
    return {
        "name": core_path.stem,
        "first_stage": {"c": c.tolist(), "A": A.tolist(), "b": b.tolist(), "perturbed_rows": list(range(len(b)))},
        "second_stage": {"q": q.tolist(), "W": W.tolist()},
        "scenarios": scenarios,
    }
