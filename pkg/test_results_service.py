import pytest

import database
from models import AttackReport, CurvePoint, Provenance, ScenarioRun
from results_service import comparison_table, get_metrics, get_runs, record_run, run_key


@pytest.fixture(autouse=True)
def registry(tmp_path):
    database.configure_database(f"sqlite:///{tmp_path / 'results.db'}")
    yield
    database.engine.dispose()
    database.engine = None
    database.SessionLocal = None


def make_report(scenario="identity", seed=1, precision=1.0):
    curves = tuple(
        CurvePoint(provenance=Provenance.RECONSTRUCTION, match_key="HUD", uniques_only=False, k=k,
                   precision=precision, recall=0.5, match_rate=None, n_putative=2, n_true=4)
        for k in (1, 2)
    )
    return AttackReport(
        scenario=scenario, seed=seed, flagged_blocks=("01-000001", "01-000004"), n_blocks=10,
        n_true_violating_blocks=3, block_precision=precision, block_recall=2 / 3, n_true_violations=4,
        curves=curves, violation_counts=(("01-000001", 1, 1), ("01-000004", 3, 2)),
    )


def test_run_key():
    assert run_key("swap", 3, "abc123") == "swap/3/abc123"


def test_record_run_saves_metrics():
    report = make_report()
    result = record_run(report, "identity", 1, "h1", "runs/identity/seed_1")
    assert result == {"run_key": "identity/1/h1", "saved": 9 + 2 * 5, "replaced": 0, "failed": 0}

    db = database.SessionLocal()
    try:
        runs = get_runs(db)
        assert [(r.scenario, r.seed, r.status, r.n_flagged) for r in runs] == [("identity", 1, "COMPLETED", 2)]
        precision = get_metrics(db, runs[0], "precision")
        assert [(m.k, m.value) for m in precision] == [(1, 1.0), (2, 1.0)]
        rates = get_metrics(db, runs[0], "match_rate")
        assert [m.value for m in rates] == [None, None]
    finally:
        db.close()


def test_re_recording_replaces_run():
    record_run(make_report(precision=0.25), "identity", 1, "h1", "out")
    result = record_run(make_report(precision=0.75), "identity", 1, "h1", "out")
    assert result["replaced"] == 1

    db = database.SessionLocal()
    try:
        runs = db.query(ScenarioRun).all()
        assert len(runs) == 1
        assert runs[0].block_precision == 0.75
        assert len(get_metrics(db, runs[0])) == result["saved"]
    finally:
        db.close()


def test_comparison_table_skips_failed_runs():
    record_run(make_report("identity", 1), "identity", 1, "h1", "out")
    record_run(make_report("swap", 1, precision=0.5), "swap", 1, "h1", "out")
    record_run(None, "dp", 1, "h1", "out", status="FAILED")

    table = comparison_table()
    assert table.scenario.tolist() == ["identity", "swap"]
    assert table.n_blocks.tolist() == [10, 10]
    assert table.flagged_blocks.tolist() == [2, 2]
    assert table.block_precision.tolist() == [1.0, 0.5]
    assert table.violation_correlation.tolist() == pytest.approx([1.0, 1.0])

    only_swap = comparison_table(["swap"])
    assert only_swap.scenario.tolist() == ["swap"]


def test_failed_run_has_no_metrics():
    result = record_run(None, "dp", 2, "h2", "out", status="FAILED")
    assert result["saved"] == 0
    db = database.SessionLocal()
    try:
        run = get_runs(db, "dp")[0]
        assert run.status == "FAILED" and run.block_precision is None
    finally:
        db.close()
