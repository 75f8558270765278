import numpy as np
import pandas as pd
import pytest

from errors import MopSanError, NonFiniteError
from models import CrossPlayMatrix, ScoreTable
from report import emit_report, format_result, load_results, save_result

NAMES = ["A", "B", "C", "D", "E"]


@pytest.fixture
def matrix():
    mean = (np.arange(25, dtype=float).reshape(5, 5) * 2.5).tolist()
    return CrossPlayMatrix(method="mop-san", names=NAMES, mean=mean, std=[[1.0] * 5 for _ in range(5)],
                           episodes=[[10] * 5 for _ in range(5)])


@pytest.fixture
def table():
    return ScoreTable(title="Generalization", rows=["mop-san", "san"], columns=NAMES,
                      scores=[[80.0, 60.0, 70.0, 90.0, 100.0], [20.0, 20.0, 20.0, 20.0, 20.0]])


def test_matrix_csv_has_one_row_per_cell(tmp_path, matrix):
    path = emit_report(matrix, "csv", tmp_path)
    assert path.name == "mop-san-crossplay.csv"
    lines = path.read_text().splitlines()
    assert lines[0] == "ego,partner,mean,std,episodes"
    assert len(lines) == 26
    frame = pd.read_csv(path)
    assert frame.loc[(frame.ego == "B") & (frame.partner == "C"), "mean"].item() == pytest.approx(17.5)


def test_table_csv_header_and_summary_columns(tmp_path, table):
    frame = pd.read_csv(emit_report(table, "csv", tmp_path))
    assert list(frame.columns) == ["method", "A", "B", "C", "D", "E", "avg", "std"]
    assert frame["avg"].tolist() == [80.0, 20.0]
    assert frame["std"].tolist()[1] == 0.0


@pytest.mark.parametrize("fmt", ["csv", "svg"])
def test_re_emission_is_byte_identical(tmp_path, matrix, fmt):
    first = emit_report(matrix, fmt, tmp_path / "one").read_bytes()
    second = emit_report(matrix, fmt, tmp_path / "two").read_bytes()
    assert first == second


def test_heatmap_is_an_svg(tmp_path, table):
    text = emit_report(table, "svg", tmp_path).read_text()
    assert "<svg" in text


def test_unwritable_destination_is_reported(tmp_path, matrix):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory")
    with pytest.raises(MopSanError, match="cannot write report"):
        emit_report(matrix, "csv", blocker)


def test_non_finite_scores_are_refused(tmp_path):
    table = ScoreTable(title="broken", rows=["x"], columns=["A"], scores=[[float("nan")]])
    with pytest.raises(NonFiniteError):
        emit_report(table, "csv", tmp_path)
    assert not (tmp_path / "broken.csv").exists()


def test_unknown_format_is_rejected(tmp_path, matrix):
    with pytest.raises(MopSanError):
        emit_report(matrix, "pdf", tmp_path)


def test_saved_results_reload_in_name_order(tmp_path, matrix, table):
    save_result(table, tmp_path)
    save_result(matrix, tmp_path)
    loaded = load_results(tmp_path)
    assert loaded == [table, matrix]
    with pytest.raises(MopSanError):
        load_results(tmp_path / "missing")


def test_console_summary(matrix, table):
    text = format_result(matrix)
    assert "mop-san cross-play" in text and "learning score 30.00" in text
    assert "generalization score" in text
    assert format_result(table).startswith("Generalization\n")
