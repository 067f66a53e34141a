"""Result tables as CSV, JSON and Markdown."""
from __future__ import annotations

import csv
import io
import json
from decimal import Decimal
from pathlib import Path
from typing import Iterable, List, Sequence

from .errors import ReportError
from .suite import ResultRow

COLUMNS = ("task", "method", "finetune_opt", "config", "top1", "drop_from_fp", "seed")
FORMATS = ("csv", "markdown", "json")


def _cells(r: ResultRow) -> list:
    return [r.task, r.method, r.finetune_opt, r.config, str(r.top1), str(r.drop_from_fp), str(r.seed)]


def _from_cells(cells: Sequence[str]) -> ResultRow:
    task, method, opt, config, top1, drop, seed = cells
    return ResultRow(task, method, opt, config, Decimal(top1), Decimal(drop), int(seed))


def to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for r in rows:
        w.writerow(_cells(r))
    return buf.getvalue()


def to_json(rows: Sequence[ResultRow]) -> str:
    return json.dumps([dict(zip(COLUMNS, _cells(r))) for r in rows], indent=2) + "\n"


def _signed(d: Decimal) -> str:
    return f"+{d}" if d > 0 else str(d)


def to_markdown(rows: Sequence[ResultRow]) -> str:
    """Grid with one line per (task, method, finetune_opt) and one column per config.

    Cells read ``top1 (drop)`` except the FP32 column.
    """
    fp = {(r.task, r.finetune_opt, r.seed): r.top1 for r in rows if r.method == "FP32"}
    configs: List[str] = []
    lines: dict = {}
    for r in rows:
        if r.method == "FP32":
            continue
        if r.config not in configs:
            configs.append(r.config)
        key = (r.task, r.method, r.finetune_opt, r.seed)
        lines.setdefault(key, {})[r.config] = f"{r.top1} ({_signed(r.drop_from_fp)})"
    if not lines:  # FP-only table
        for (task, opt, seed), top1 in fp.items():
            lines[(task, "FP32", opt, seed)] = {}
    header = ["Task", "Method", "Fine-tune", "Seed", "FP32", *configs]
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for (task, method, opt, seed), cells in lines.items():
        base = fp.get((task, opt, seed), "")
        out.append("| " + " | ".join(
            [task, method, opt, str(seed), str(base)] + [cells.get(c, "") for c in configs]) + " |")
    return "\n".join(out) + "\n"


def render(rows: Sequence[ResultRow], fmt: str) -> str:
    if not rows:
        raise ReportError("no result rows to report")
    if fmt == "csv":
        return to_csv(rows)
    if fmt == "json":
        return to_json(rows)
    if fmt == "markdown":
        return to_markdown(rows)
    raise ReportError(f"unknown report format {fmt!r}; expected one of {FORMATS}")


def emit_report(rows: Sequence[ResultRow], fmt: str, path) -> Path:
    text = render(rows, fmt)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def parse_csv(text: str) -> List[ResultRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != COLUMNS:
        raise ReportError(f"unexpected CSV header {header}")
    return [_from_cells(cells) for cells in reader if cells]


def parse_json(text: str) -> List[ResultRow]:
    return [_from_cells([str(d[c]) for c in COLUMNS]) for d in json.loads(text)]


def parse_report(path) -> List[ResultRow]:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return parse_json(text)
    return parse_csv(text)
