import pandas as pd
import pytest

from skinssl.downstream import SWEEP_COLUMNS
from skinssl.errors import InsufficientDataError, SchemaError
from skinssl.plots import export_plots, read_metrics


def sweep_table():
    rows = []
    for mode, offset in (("frozen", 0.0), ("end_to_end", 0.3)):
        for budget in (0.033, 0.1, 0.33, 1.0):
            for seed in (0, 1):
                value = offset + 0.5 / budget ** 0.5 + 0.01 * seed
                rows.append(["force", mode, budget, seed, "rmse", "z", value])
                rows.append(["force", mode, budget, seed, "rmse", "all", value])
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


@pytest.fixture
def metrics_dir(tmp_path):
    path = tmp_path / "metrics"
    path.mkdir()
    sweep_table().to_csv(path / "force.csv", index=False)
    return path


def test_export_writes_svg_and_summary(metrics_dir, tmp_path):
    written = export_plots(metrics_dir, tmp_path / "plots")
    names = sorted(p.name for p in written)
    assert names == ["budget_curves_summary.csv", "force.svg"]
    summary = pd.read_csv(tmp_path / "plots" / "budget_curves_summary.csv")
    assert set(summary["budget"]) == {0.033, 0.1, 0.33, 1.0}
    assert (summary["count"] == 2).all()


def test_svg_is_byte_stable(metrics_dir, tmp_path):
    export_plots(metrics_dir, tmp_path / "a")
    export_plots(metrics_dir, tmp_path / "b")
    a = (tmp_path / "a" / "force.svg").read_bytes()
    b = (tmp_path / "b" / "force.svg").read_bytes()
    assert a == b
    assert b"<svg" in a


def test_summary_files_are_skipped(metrics_dir):
    export_plots(metrics_dir)
    table = read_metrics(metrics_dir)
    assert len(table) == len(sweep_table())


def test_missing_columns(metrics_dir):
    pd.DataFrame({"task": ["force"], "value": [1.0]}).to_csv(metrics_dir / "bad.csv", index=False)
    with pytest.raises(SchemaError, match="bad.csv"):
        read_metrics(metrics_dir)


def test_empty_directory(tmp_path):
    with pytest.raises(InsufficientDataError):
        export_plots(tmp_path)


def test_nothing_plottable(tmp_path):
    table = pd.DataFrame([["force", "frozen", 1.0, 0, "correlation", "x", 0.9]],
                         columns=SWEEP_COLUMNS)
    table.to_csv(tmp_path / "force.csv", index=False)
    with pytest.raises(SchemaError):
        export_plots(tmp_path)
