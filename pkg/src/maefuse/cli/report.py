"""CSV and Markdown report tables."""

from __future__ import annotations

import csv
import io
from pathlib import Path

from ..errors import ContractError

MISSING = "n/a"


def fmt_percent(value: float, decimals: int = 2) -> str:
    """Fraction in [0, 1] -> percent string, e.g. 0.9519 -> '95.19'."""
    pct = 100.0 * float(value)
    if not -1e-9 <= pct <= 100.0 + 1e-9:
        raise ContractError(f"percent value {pct} outside [0, 100]")
    return f"{pct:.{decimals}f}"


def format_cell(value, percent: bool) -> str:
    if value is None:
        return MISSING
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if percent:
        return fmt_percent(value)
    return repr(float(value))


def table(rows: list[dict], percent=()) -> tuple[list[str], list[list[str]]]:
    """Column order is the key order of the first row; every row must match it."""
    if not rows:
        raise ContractError("a report needs at least one row")
    columns = list(rows[0])
    percent = set(percent)
    body = []
    for i, row in enumerate(rows):
        if list(row) != columns:
            raise ContractError(f"row {i} has columns {list(row)}, expected {columns}")
        body.append([format_cell(row[c], c in percent) for c in columns])
    return columns, body


def to_csv(columns: list[str], body: list[list[str]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    writer.writerows(body)
    return buf.getvalue()


def to_markdown(columns: list[str], body: list[list[str]]) -> str:
    def line(cells):
        return "| " + " | ".join(c.replace("|", "\\|") for c in cells) + " |"

    out = [line(columns), "|" + "|".join("---" for _ in columns) + "|"]
    out.extend(line(r) for r in body)
    return "\n".join(out) + "\n"


def emit_report(rows: list[dict], out_dir: str | Path, stem: str = "report", percent=()) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and its Markdown mirror ``<stem>.md``."""
    columns, body = table(rows, percent)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    md_path = out_dir / f"{stem}.md"
    csv_path.write_text(to_csv(columns, body))
    md_path.write_text(to_markdown(columns, body))
    return csv_path, md_path


def merge_reports(paths: list[str | Path], out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
    """Stack several report CSVs into one, prefixed with a ``run`` column."""
    columns: list[str] | None = None
    body = []
    for p in paths:
        p = Path(p)
        with p.open(newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise ContractError(f"{p} is empty") from None
            if columns is None:
                columns = ["run", *header]
            elif columns[1:] != header:
                raise ContractError(f"{p} columns {header} differ from {columns[1:]}")
            body.extend([p.parent.name, *r] for r in reader)
    if columns is None:
        raise ContractError("no reports to merge")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_dir / f"{stem}.csv", out_dir / f"{stem}.md"
    csv_path.write_text(to_csv(columns, body))
    md_path.write_text(to_markdown(columns, body))
    return csv_path, md_path
