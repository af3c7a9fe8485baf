"""
Result files and console summaries.

CSV goes through pandas with a fixed float format, JSON through
dumps_stable, so identical runs write identical bytes. Human-facing tables
go to a stderr console (rich when installed, plain text otherwise).
"""

from __future__ import annotations

import logging
import math
import re
import sys
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import pandas as pd

from .fileio import PathLike, atomic_write_bytes, atomic_write_text, safe_json_save

try:
    from rich.console import Console as RichConsole
    from rich.table import Table
    from rich import box
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

logger = logging.getLogger(__name__)

FLOAT_FORMAT = '%.8f'
METRICS_COLUMNS = ['step', 'split', 'loss', 'accuracy']
CURVES_COLUMNS = ['method', 'seed', 'step', 'val_loss']
RESULTS_COLUMNS = ['method', 'trainable_params', 'expected_params', 'trainable_percent', 'val_accuracy', 'final_val_loss']


class Console:
    """stderr console; falls back to plain text if rich is not available."""

    def __init__(self, file=None):
        self.file = file
        self.is_fallback = not RICH_AVAILABLE
        if RICH_AVAILABLE:
            self._console = RichConsole(file=file, stderr=file is None)

    @property
    def _out(self):
        return self.file or sys.stderr

    def print(self, *args, **kwargs):
        if RICH_AVAILABLE:
            self._console.print(*args, **kwargs)
        else:
            text = ' '.join(str(a) for a in args)
            text = re.sub(r'\[/?[a-z_ ]+\]', '', text)
            print(text, file=self._out)

    def rule(self, title: str = '', **kwargs):
        if RICH_AVAILABLE:
            self._console.rule(title, **kwargs)
        else:
            width = 60
            if title:
                side = (width - len(title) - 2) // 2
                print('=' * side + f" {title} " + '=' * side, file=self._out)
            else:
                print('=' * width, file=self._out)

    def table(self, title: str, columns: Sequence[str], rows: Iterable[Sequence]):
        rows = [[_cell(v) for v in row] for row in rows]
        if RICH_AVAILABLE:
            table = Table(title=title, box=box.ROUNDED)
            for col in columns:
                table.add_column(col)
            for row in rows:
                table.add_row(*row)
            self._console.print(table)
            return
        widths = [max(len(str(c)), *(len(r[i]) for r in rows)) if rows else len(str(c))
                  for i, c in enumerate(columns)]
        self.rule(title)
        print('  '.join(str(c).ljust(w) for c, w in zip(columns, widths)), file=self._out)
        for row in rows:
            print('  '.join(v.ljust(w) for v, w in zip(row, widths)), file=self._out)


def _cell(value) -> str:
    if isinstance(value, float):
        return 'inf' if math.isinf(value) else f"{value:.4f}"
    return '-' if value is None else str(value)


def _write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator='\n')
    out = atomic_write_text(path, text)
    logger.info(f"[SAVED] {out} ({len(frame)} rows)")
    return out


def write_metrics_csv(records, path: PathLike) -> Path:
    """One row per MetricRecord, in recording order: step,split,loss,accuracy."""
    frame = pd.DataFrame([[r.step, r.split, r.loss, r.accuracy] for r in records], columns=METRICS_COLUMNS)
    return _write_frame(frame, path)


def write_curves_csv(curves, path: PathLike) -> Path:
    frame = pd.DataFrame([[c.method, c.seed, c.step, c.val_loss] for c in curves], columns=CURVES_COLUMNS)
    return _write_frame(frame, path)


def read_metrics_csv(path: PathLike) -> pd.DataFrame:
    return pd.read_csv(path)


def write_summary(result, path: PathLike) -> Path:
    """{method: {seed: steps_to_threshold}} with 'never' / 'failed' markers."""
    return safe_json_save(path, result.summary())


def write_results(rows: List[dict], out_dir: PathLike, xlsx: bool = False) -> List[Path]:
    """results.json, plus results.xlsx (one row per method) when requested."""
    out = Path(out_dir)
    written = [safe_json_save(out / 'results.json', {'methods': rows})]
    if xlsx:
        written.append(write_results_xlsx(rows, out / 'results.xlsx'))
    return written


def write_results_xlsx(rows: List[dict], path: PathLike) -> Path:
    from io import BytesIO

    from openpyxl import Workbook

    wb = Workbook()
    ws = wb.active
    ws.title = 'Results'
    ws.append(RESULTS_COLUMNS)
    for row in rows:
        ws.append([row.get(col) for col in RESULTS_COLUMNS])
    column_widths = {'A': 12, 'B': 18, 'C': 18, 'D': 18, 'E': 14, 'F': 16}
    for col, width in column_widths.items():
        ws.column_dimensions[col].width = width

    buffer = BytesIO()
    wb.save(buffer)
    out = atomic_write_bytes(path, buffer.getvalue())
    logger.info(f"[SAVED] {out}")
    return out


def convergence_rows(result, methods: Sequence[str]) -> List[list]:
    rows = []
    for method in methods:
        runs = result.steps_to_threshold.get(method, {})
        rows.append([method, *[runs[s] for s in sorted(runs)], result.median_steps(method)])
    return rows


def print_convergence(console: Console, result, methods: Sequence[str], threshold: float,
                      seeds: Optional[Sequence[int]] = None):
    seeds = list(seeds) if seeds is not None else sorted({s for runs in result.steps_to_threshold.values() for s in runs})
    columns = ['method', *[f"seed {s}" for s in seeds], 'median']
    console.table(f"Steps to val loss <= {threshold}", columns, convergence_rows(result, methods))
