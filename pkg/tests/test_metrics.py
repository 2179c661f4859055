"""Tests for the metrics log and its export."""
import csv

from nightreid.metrics import MetricsLogger, export_metrics, read_metrics

RECORDS = [
    {"step": 1, "domain": "real", "id": 2.0, "triplet": 0.5, "distill": 0.1, "relight": 0.3, "total": 2.9, "lr": 0.001},
    {"step": 2, "domain": "synthetic", "id": 1.8, "triplet": 0.4, "distill": 0.1, "relight": 0.2, "total": 2.5, "lr": 0.002},
    {"step": 3, "domain": "real", "id": 1.5, "triplet": 0.3, "distill": 0.1, "relight": 0.2, "total": 2.1, "lr": 0.003, "relight_rec": 0.1},
]


def test_logger_truncates_fresh_run(tmp_path):
    """Test a new run replaces the records of an earlier one."""
    path = tmp_path / "logs" / "metrics.jsonl"
    with MetricsLogger(path) as metrics:
        for record in RECORDS:
            metrics.log(record)
    with MetricsLogger(path) as metrics:
        metrics.log(RECORDS[0])

    assert read_metrics(path) == RECORDS[:1]


def test_logger_resume_drops_later_steps(tmp_path):
    """Test resuming keeps steps up to the checkpoint and drops the rest."""
    path = tmp_path / "metrics.jsonl"
    with MetricsLogger(path) as metrics:
        for record in RECORDS:
            metrics.log(record)
    with MetricsLogger(path, resume_step=1) as metrics:
        metrics.log(RECORDS[1])
        metrics.log(RECORDS[2])

    assert read_metrics(path) == RECORDS
    assert metrics.records == RECORDS[1:]


def test_logger_resume_without_file(tmp_path):
    """Test resuming into a missing log starts it empty."""
    path = tmp_path / "metrics.jsonl"
    with MetricsLogger(path, resume_step=5) as metrics:
        metrics.log(RECORDS[2])

    assert read_metrics(path) == RECORDS[2:]


def test_logger_in_memory():
    """Test a logger without a path only keeps records."""
    metrics = MetricsLogger()
    metrics.log(RECORDS[0])
    metrics.close()

    assert metrics.records == RECORDS[:1]
    assert metrics.path is None


def test_read_metrics_skips_blank_lines(tmp_path):
    """Test blank lines are ignored."""
    path = tmp_path / "metrics.jsonl"
    path.write_text('{"step": 1}\n\n{"step": 2}\n', encoding="utf-8")

    assert read_metrics(path) == [{"step": 1}, {"step": 2}]


def test_export_metrics(tmp_path):
    """Test the CSV holds every record and each component gets a plot."""
    path = tmp_path / "metrics.jsonl"
    with MetricsLogger(path) as metrics:
        for record in RECORDS:
            metrics.log(record)
    written = export_metrics(path, tmp_path / "report")

    with open(written[0], encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert len(rows) == 3
    assert list(rows[0])[:7] == ["step", "domain", "id", "triplet", "distill", "relight", "total"]
    assert rows[2]["relight_rec"] == "0.1"
    assert rows[0]["relight_rec"] == ""
    assert {p.name for p in written[1:]} == {
        "id.png", "triplet.png", "distill.png", "relight.png", "total.png", "lr.png", "relight_rec.png"
    }
    assert all(p.stat().st_size > 0 for p in written)
