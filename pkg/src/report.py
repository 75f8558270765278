"""
Report Emission.

Writes cross-play matrices and score tables as CSV (pandas) or annotated
heatmap SVG (matplotlib, Agg backend), stores the raw results as JSON so
`report --in` can re-render them later, and formats console summaries with
tabulate. Output is byte-stable: fixed float formatting, fixed row order, no
timestamps in the SVG.
"""
import json
import re
from pathlib import Path
from typing import List, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402
from tabulate import tabulate  # noqa: E402

from errors import MopSanError, NonFiniteError  # noqa: E402
from logger import setup_logger  # noqa: E402
from models import CrossPlayMatrix, ScoreTable  # noqa: E402

logger = setup_logger(__name__)

Result = Union[CrossPlayMatrix, ScoreTable]
FORMATS = ("csv", "svg")
FLOAT_FORMAT = "%.4f"
SVG_SALT = "mopsan"


def slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "-", text).strip("-").lower() or "report"


def report_stem(obj: Result) -> str:
    if isinstance(obj, CrossPlayMatrix):
        return f"{slug(obj.method)}-crossplay"
    return slug(obj.title)


# --- Frames ---

def matrix_frame(matrix: CrossPlayMatrix) -> pd.DataFrame:
    rows = [
        {"ego": ego, "partner": partner, "mean": matrix.mean[i][j], "std": matrix.std[i][j],
         "episodes": matrix.episodes[i][j]}
        for i, ego in enumerate(matrix.names)
        for j, partner in enumerate(matrix.names)
    ]
    return pd.DataFrame(rows, columns=["ego", "partner", "mean", "std", "episodes"])


def table_frame(table: ScoreTable) -> pd.DataFrame:
    frame = pd.DataFrame(table.scores, columns=table.columns)
    frame.insert(0, "method", table.rows)
    frame["avg"] = table.averages()
    frame["std"] = table.deviations()
    return frame


def _check_finite(obj: Result):
    values = np.asarray(obj.mean if isinstance(obj, CrossPlayMatrix) else obj.scores, dtype=float)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError(f"cannot report non-finite scores for '{report_stem(obj)}'")


# --- Writers ---

def write_csv(obj: Result, path: Path) -> Path:
    frame = matrix_frame(obj) if isinstance(obj, CrossPlayMatrix) else table_frame(obj)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def write_heatmap(obj: Result, path: Path) -> Path:
    if isinstance(obj, CrossPlayMatrix):
        values = np.asarray(obj.mean, dtype=float)
        row_labels, col_labels = obj.names, obj.names
        title, xlabel, ylabel = f"{obj.method} cross-play", "partner", "ego"
    else:
        values = np.asarray(obj.scores, dtype=float)
        row_labels, col_labels = obj.rows, obj.columns
        title, xlabel, ylabel = obj.title, "seed", "variant"

    with plt.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "path"}):
        fig, ax = plt.subplots(figsize=(1.2 * len(col_labels) + 2, 0.8 * len(row_labels) + 1.5))
        image = ax.imshow(values, cmap="viridis", aspect="auto")
        ax.set_xticks(range(len(col_labels)), labels=col_labels)
        ax.set_yticks(range(len(row_labels)), labels=row_labels)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        span = values.max() - values.min() if values.size else 0.0
        for (i, j), value in np.ndenumerate(values):
            bright = span > 0 and (value - values.min()) / span > 0.5
            ax.text(j, i, f"{value:.1f}", ha="center", va="center", color="black" if bright else "white")
        fig.colorbar(image, ax=ax)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def emit_report(obj: Result, fmt: str, out_dir) -> Path:
    """Writes `obj` in `fmt` (csv | svg) into `out_dir`; returns the file path."""
    if fmt not in FORMATS:
        raise MopSanError(f"unknown report format '{fmt}'; choose from {FORMATS}")
    _check_finite(obj)
    out_dir = Path(out_dir)
    path = out_dir / f"{report_stem(obj)}.{fmt}"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        written = write_csv(obj, path) if fmt == "csv" else write_heatmap(obj, path)
    except OSError as exc:
        raise MopSanError(f"cannot write report {path}: {exc}") from exc
    logger.info(f"Wrote {written}")
    return written


# --- Raw results ---

def save_result(obj: Result, out_dir) -> Path:
    out_dir = Path(out_dir)
    path = out_dir / f"{report_stem(obj)}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(obj.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise MopSanError(f"cannot write result {path}: {exc}") from exc
    return path


def load_results(in_dir) -> List[Result]:
    """Every saved matrix and table under `in_dir`, in file-name order."""
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise MopSanError(f"result directory not found: {in_dir}")
    results: List[Result] = []
    for path in sorted(in_dir.glob("*.json")):
        data = json.loads(path.read_text(encoding="utf-8"))
        model = CrossPlayMatrix if "names" in data else ScoreTable
        results.append(model.model_validate(data))
    if not results:
        raise MopSanError(f"no saved results in {in_dir}")
    return results


# --- Console ---

def format_result(obj: Result) -> str:
    if isinstance(obj, CrossPlayMatrix):
        rows = [[ego] + [f"{m:.1f}" for m in obj.mean[i]] for i, ego in enumerate(obj.names)]
        table = tabulate(rows, headers=["ego \\ partner"] + obj.names, tablefmt="grid", disable_numparse=True)
        summary = (f"learning score {obj.learning_score():.2f}"
                   + (f" | generalization score {obj.generalization_score():.2f}" if len(obj.names) > 1 else ""))
        return f"{obj.method} cross-play\n{table}\n{summary}"
    frame = table_frame(obj)
    return f"{obj.title}\n" + tabulate(frame.values.tolist(), headers=list(frame.columns), tablefmt="grid",
                                       floatfmt=".2f")
