from __future__ import annotations

import logging
from io import BytesIO
from pathlib import Path
from typing import Sequence

from openpyxl import Workbook
from openpyxl.chart import LineChart, Reference
from openpyxl.utils import get_column_letter

from core.services.train import read_metrics, summarize_trials

logger = logging.getLogger(__name__)


def _auto_width(ws, max_cols=40):
    for col in range(1, min(ws.max_column, max_cols) + 1):
        ws.column_dimensions[get_column_letter(col)].width = 16


def _wb_to_bytes(wb: Workbook) -> bytes:
    bio = BytesIO()
    wb.save(bio)
    return bio.getvalue()


def _line_chart(ws, title: str, y_title: str, first_col: int, last_col: int, rows: int, anchor: str):
    chart = LineChart()
    chart.title = title
    chart.x_axis.title = "generator iteration"
    chart.y_axis.title = y_title
    data = Reference(ws, min_col=first_col, max_col=last_col, min_row=1, max_row=rows + 1)
    chart.add_data(data, titles_from_data=True)
    chart.set_categories(Reference(ws, min_col=1, min_row=2, max_row=rows + 1))
    ws.add_chart(chart, anchor)


def metrics_workbook(runs: Sequence[tuple[str, Path]]) -> bytes:
    """
    Per-iteration losses and FID/IS of one or more runs, side by side,
    with line charts and a trial-summary sheet.
    runs: (label, metrics.csv path) pairs.
    """
    tables = [(label, read_metrics(path)) for label, path in runs]

    wb = Workbook()
    losses = wb.active
    losses.title = "Losses"
    header = ["iter"]
    for label, _ in tables:
        header += [f"{label} loss_d", f"{label} loss_g"]
    losses.append(header)
    iters = sorted({row["iter"] for _, rows in tables for row in rows})
    by_run = [{row["iter"]: row for row in rows} for _, rows in tables]
    for it in iters:
        line = [it]
        for rows in by_run:
            row = rows.get(it, {})
            line += [row.get("loss_d"), row.get("loss_g")]
        losses.append(line)
    _auto_width(losses)
    if iters:
        _line_chart(losses, "Adversarial losses", "loss", 2, len(header), len(iters), "H2")

    scores = wb.create_sheet("FID-IS")
    header = ["iter"]
    for label, _ in tables:
        header += [f"{label} fid", f"{label} is"]
    scores.append(header)
    eval_iters = sorted({row["iter"] for _, rows in tables for row in rows if row["fid"] is not None})
    for it in eval_iters:
        line = [it]
        for rows in by_run:
            row = rows.get(it, {})
            line += [row.get("fid"), row.get("is")]
        scores.append(line)
    _auto_width(scores)
    if eval_iters:
        _line_chart(scores, "FID and IS", "score", 2, len(header), len(eval_iters), "H2")

    trials = wb.create_sheet("Trials")
    trials.append(["run", "final iter", "fid", "is"])
    summary = summarize_trials([path for _, path in runs])
    labels = {str(path): label for label, path in runs}
    for path, it, fid, score in summary.finals:
        trials.append([labels.get(path, path), it, fid, score])
    trials.append([])
    trials.append(["runs", summary.runs])
    trials.append(["fid mean", summary.fid_mean])
    trials.append(["fid std", summary.fid_std])
    trials.append(["is mean", summary.is_mean])
    trials.append(["is std", summary.is_std])
    _auto_width(trials)

    return _wb_to_bytes(wb)


def export_metrics(runs: Sequence[tuple[str, Path]], out_path) -> Path:
    out_path = Path(out_path)
    out_path.write_bytes(metrics_workbook(runs))
    logger.info("metrics workbook written path=%s runs=%s", out_path, len(runs))
    return out_path
