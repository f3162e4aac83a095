import math

import pandas as pd

from utils import json_utils

FLOAT_FORMAT = "%.17g"


def _header_line(metadata: dict) -> str:
    return "# " + json_utils.dumps(metadata, compact=True)


def _format_value(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return FLOAT_FORMAT % value
    return str(value)


def write_csv_report(path, rows: list[dict], columns: list[str], metadata: dict, summary: dict | None = None) -> None:
    """Writes a CSV with a `#` JSON metadata header and an optional `#` summary footer.

    Args:
        path (str | Path | TextIO): Output file or an open text stream.
        rows (list[dict]): One record per CSV row.
        columns (list[str]): Column order; missing keys are written empty.
        metadata (dict): Resolved config and seed embedded in the header.
        summary (dict | None): Aggregates appended as `# key=value` lines.
    """
    df = pd.DataFrame.from_records(rows, columns=columns)
    if hasattr(path, "write"):
        _write_csv(path, df, metadata, summary)
        return
    with open(path, "w", encoding="utf-8", newline="") as handle:
        _write_csv(handle, df, metadata, summary)


def _write_csv(handle, df: pd.DataFrame, metadata: dict, summary: dict | None) -> None:
    handle.write(_header_line(metadata) + "\n")
    df.to_csv(handle, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    for key, value in (summary or {}).items():
        handle.write(f"# {key}={_format_value(value)}\n")


def read_csv_report(path) -> tuple[dict, pd.DataFrame]:
    """Inverse of ``write_csv_report``: returns (metadata, rows); the footer is skipped."""
    with open(path, encoding="utf-8") as handle:
        header = handle.readline()
    metadata = json_utils.loads(header[1:].strip()) if header.startswith("#") else {}
    df = pd.read_csv(path, comment="#", float_precision="round_trip")
    return metadata, df
