import os

import pytest
from matplotlib.figure import Figure

from attribution_utils.benchmarks.Metrics import DatasetReport
from attribution_utils.benchmarks.ResultsProcessor import ResultsProcessor, as_percent


def report(**changes):
    values = dict(
        means={"coverage": 0.75, "precision": 0.5, "recall": 1.0, "f1": 2 / 3, "grounding_score": 0.5,
               "over_citation_rate": None},
        defined={"coverage": 4, "precision": 3, "recall": 3, "f1": 3, "grounding_score": 4, "over_citation_rate": 0},
        per_modality_precision={"visual": 0.5, "audio": None},
        per_modality_counts={"visual": 6, "audio": 0},
        responses=4, skipped=1, undefined_attribution=1, accuracy=0.25, graded=4,
    )
    values.update(changes)
    return DatasetReport(**values)


def test_as_percent():
    assert as_percent(None) == "-"
    assert as_percent(2 / 3) == "66.7"


def test_table(tmp_path):
    processor = ResultsProcessor("run1")
    warnings = ["q1: modality-missing for visual (no track)", "q2: modality-missing for visual (no track)",
                "cache miss"]
    df = processor.generate_table(report(), warnings)
    assert list(df["Metric"]) == ["Coverage", "Precision", "Recall", "F1", "Grounding", "Over-citation",
                                  "Accuracy", "P[visual]", "P[audio]"]
    assert df["Mean(%)"].iloc[0] == 75.0
    assert df["Mean(%)"].isna().sum() == 2

    text = processor.render()
    assert "{:<16} {:<10}".format("Coverage", "75.0") in text
    assert "{:<16} -".format("Over-citation") in text
    assert "{:<16} {:<10} (6)".format("P[visual]", "50.0") in text
    assert "Responses: 4, Skipped: 1" in text
    assert "    2  modality-missing for visual" in text
    assert "    1  cache miss" in text

    path = processor.save_table(tmp_path)
    assert path.name == "run1_results.txt"
    assert path.read_text(encoding="utf-8").startswith("Metric")


def test_plot(tmp_path):
    processor = ResultsProcessor("run1", "Test run")
    df = processor.generate_table(report())
    path = processor.generate_plot(df, tmp_path)
    assert path == tmp_path / "run1_metrics.png" and path.stat().st_size > 0


def test_plot_skips_when_nothing_is_defined(tmp_path):
    empty = report(means={name: None for name in report().means}, accuracy=None,
                   per_modality_precision={"visual": None, "audio": None})
    processor = ResultsProcessor("empty")
    assert processor.generate_plot(processor.generate_table(empty), tmp_path) is None
    assert not list(tmp_path.iterdir())


def test_interrupted_table_write_keeps_the_old_table(tmp_path, monkeypatch):
    processor = ResultsProcessor("run1")
    processor.generate_table(report())
    old = tmp_path / "run1_results.txt"
    old.write_text("previous run\n", encoding="utf-8")

    def fail_replace(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", fail_replace)
    with pytest.raises(OSError):
        processor.save_table(tmp_path)
    assert old.read_text(encoding="utf-8") == "previous run\n"
    assert [p.name for p in tmp_path.iterdir()] == ["run1_results.txt"]


def test_interrupted_plot_leaves_no_file(tmp_path, monkeypatch):
    def half_written(self, fname, **kwargs):
        with open(fname, "wb") as f:
            f.write(b"\x89PNG")
        raise OSError("interrupted")

    monkeypatch.setattr(Figure, "savefig", half_written)
    processor = ResultsProcessor("run1")
    with pytest.raises(OSError):
        processor.generate_plot(processor.generate_table(report()), tmp_path)
    assert not list(tmp_path.iterdir())
