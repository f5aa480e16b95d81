import json

import pandas as pd
import pytest

import database
import main
from config import AttackConfig, EvaluationConfig, GenerationConfig, MechanismConfig, ScenarioConfig, \
    ScenarioSpec, dump_config
from models import PlotError, Provenance, StageError, SwapConfig
from pipeline_service import (
    COMPARISON_FILE,
    EMPIRICAL_FILE,
    FAILED_MARKER,
    MANIFEST,
    METRICS_FILE,
    PLOTS_DIR,
    REPORT_FILE,
    ScenarioPipeline,
)
from plot_service import emit_plots


@pytest.fixture(autouse=True)
def registry(monkeypatch):
    monkeypatch.delenv("DATABASE_URL", raising=False)
    yield
    if database.engine is not None:
        database.engine.dispose()
    database.engine = None
    database.SessionLocal = None


def tiny_config(**overrides) -> ScenarioConfig:
    values = dict(
        seeds=[0],
        generation=GenerationConfig(
            n_blocks=4,
            states=["01"],
            household_count_weights={3: 1.0, 4: 1.0},
            enforce_suppression_floor=False,
            subsidized_fraction=0.67,
            size_class_weights={"1": 0.3, "2": 0.3, "3": 0.2, "4": 0.1, "5": 0.1},
            race_weights={"white_nh": 0.6, "hispanic": 0.4},
            reference_households_per_state=2000,
            alpha=1.0,
            max_household_size=8,
        ),
        scenarios=[
            ScenarioSpec(label="identity"),
            ScenarioSpec(label="swap", mechanism=MechanismConfig(kind="swap", swap=SwapConfig(multiplier=2.0))),
        ],
        attack=AttackConfig(t=3, t_floor=1, enumeration_node_budget=5000, node_limit=5000),
        evaluation=EvaluationConfig(match_keys=["HUD", "SF1"], k_grid=[1, 2, 5]),
    )
    values.update(overrides)
    return ScenarioConfig(**values)


def test_sweep_writes_every_artifact(tmp_path):
    pipeline = ScenarioPipeline(tiny_config(), tmp_path)
    reports = pipeline.sweep()

    assert [(r.scenario, r.seed) for r in reports] == [("identity", 0), ("swap", 0)]
    assert (tmp_path / "seed_0" / "universe.tsv").exists()
    assert (tmp_path / "config.json").exists()
    for label in ("identity", "swap"):
        run_dir = tmp_path / label / "seed_0"
        manifest = json.loads((run_dir / MANIFEST).read_text())
        assert manifest["status"] == "COMPLETED" and manifest["seed"] == 0
        assert set(manifest["streams"]) == {"reference", "block", "swap", "dp", "baseline"}
        assert not (run_dir / FAILED_MARKER).exists()
        assert (run_dir / REPORT_FILE).exists()

    comparison = pd.read_csv(tmp_path / COMPARISON_FILE, sep="\t")
    assert comparison.scenario.tolist() == ["identity", "swap"]
    assert any((tmp_path / PLOTS_DIR).glob("*.png"))

    # published truth: every flagged block really violates
    identity = reports[0]
    assert identity.block_precision in (None, 1.0)


def test_runs_are_reproducible(tmp_path):
    config = tiny_config(scenarios=[ScenarioSpec(label="identity")], record_runs=False)
    ScenarioPipeline(config, tmp_path / "a").run("identity", 0)
    ScenarioPipeline(config, tmp_path / "b", workers=2).run("identity", 0)
    first = (tmp_path / "a" / "identity" / "seed_0" / METRICS_FILE).read_bytes()
    second = (tmp_path / "b" / "identity" / "seed_0" / METRICS_FILE).read_bytes()
    assert first == second


def test_stages_resume_from_disk(tmp_path):
    config = tiny_config(scenarios=[ScenarioSpec(label="identity")], record_runs=False)
    whole = ScenarioPipeline(config, tmp_path / "whole").run("identity", 0)

    staged = tmp_path / "staged"
    ScenarioPipeline(config, staged).generate(0)
    ScenarioPipeline(config, staged).publish("identity", 0)
    ScenarioPipeline(config, staged).attack("identity", 0)
    report = ScenarioPipeline(config, staged).evaluate("identity", 0)

    assert report.flagged_blocks == whole.flagged_blocks
    assert report.curves == whole.curves


def test_failed_stage_leaves_marker(tmp_path):
    pipeline = ScenarioPipeline(tiny_config(), tmp_path)
    pipeline.generate(0)
    (tmp_path / "seed_0" / EMPIRICAL_FILE).write_text("not json")

    with pytest.raises(StageError) as failure:
        pipeline.run("identity", 0)
    assert failure.value.stage == "attack"

    run_dir = tmp_path / "identity" / "seed_0"
    assert (run_dir / FAILED_MARKER).read_text().startswith("stage=attack")
    manifest = json.loads((run_dir / MANIFEST).read_text())
    assert (manifest["status"], manifest["failed_stage"]) == ("FAILED", "attack")

    # failed runs stay out of the comparison
    assert pipeline.report(from_store=True).empty


def test_report_from_files_and_store(tmp_path):
    pipeline = ScenarioPipeline(tiny_config(), tmp_path)
    pipeline.sweep()

    from_files = pipeline.report()
    from_store = pipeline.report(from_store=True)
    assert from_files.scenario.tolist() == from_store.scenario.tolist() == ["identity", "swap"]
    assert from_files.flagged_blocks.tolist() == from_store.flagged_blocks.tolist()


def test_report_skips_missing_runs(tmp_path):
    pipeline = ScenarioPipeline(tiny_config(record_runs=False), tmp_path)
    pipeline.run("identity", 0)
    table = pipeline.report(labels=["identity", "swap"])
    assert table.scenario.tolist() == ["identity"]


# plots

def test_plots_reject_empty_report_list(tmp_path):
    with pytest.raises(PlotError):
        emit_plots([], tmp_path)


def test_plots_from_sweep_reports(tmp_path):
    config = tiny_config(scenarios=[ScenarioSpec(label="identity")], record_runs=False)
    report = ScenarioPipeline(config, tmp_path / "run").run("identity", 0)
    written = emit_plots([report], tmp_path / "plots")
    assert all(path.exists() for path in written)
    assert {p.suffix for p in written} == {".png", ".csv"}

    shorter = report.model_copy(update={"scenario": "other", "curves": tuple(p for p in report.curves if p.k == 1)})
    with pytest.raises(PlotError):
        emit_plots([report, shorter], tmp_path / "plots")


# command line

def test_main_rejects_bad_config(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main.main(["report", "--config", str(bad), "--output-dir", str(tmp_path)]) == main.EXIT_CONFIG


def test_main_rejects_unknown_scenario(tmp_path):
    config = tmp_path / "config.json"
    dump_config(tiny_config(record_runs=False), config)
    argv = ["publish", "--config", str(config), "--scenario", "nope", "--output-dir", str(tmp_path)]
    assert main.main(argv) == main.EXIT_CONFIG


def test_main_reports_stage_failure(tmp_path):
    config = tmp_path / "config.json"
    dump_config(tiny_config(record_runs=False), config)
    # attacking before publishing finds no statistics
    argv = ["attack", "--config", str(config), "--scenario", "identity", "--output-dir", str(tmp_path / "out")]
    assert main.main(argv) == main.EXIT_STAGE


def test_main_generate(tmp_path):
    config = tmp_path / "config.json"
    dump_config(tiny_config(record_runs=False), config)
    argv = ["generate", "--config", str(config), "--seed", "3", "--output-dir", str(tmp_path / "out")]
    assert main.main(argv) == main.EXIT_OK
    assert (tmp_path / "out" / "seed_3" / "universe.tsv").exists()


# scenario comparison on a universe with violations

@pytest.fixture(scope="module")
def scenario_reports(tmp_path_factory):
    config = ScenarioConfig(
        seeds=[0],
        generation=GenerationConfig(
            n_blocks=80,
            states=["01"],
            household_count_weights={6: 1.0, 7: 1.0, 8: 1.0},
            enforce_suppression_floor=False,
            subsidized_fraction=0.6,
            size_class_weights={"1": 0.2, "2": 0.25, "3": 0.2, "4": 0.15, "5": 0.12, "6": 0.08},
            race_weights={"white_nh": 0.6, "hispanic": 0.4},
            race_groups=["white_nh", "hispanic"],
            reference_households_per_state=2000,
            alpha=1e-2,
            max_household_size=8,
        ),
        scenarios=[
            ScenarioSpec(label="identity"),
            ScenarioSpec(label="swap", mechanism=MechanismConfig(kind="swap", swap=SwapConfig(multiplier=2.0))),
            ScenarioSpec(label="dp", mechanism=MechanismConfig(kind="dp")),
        ],
        attack=AttackConfig(t=5, t_floor=1, dynamic_t=True, enumeration_node_budget=2000, node_limit=2000,
                            solvar_scope="none"),
        evaluation=EvaluationConfig(match_keys=["HUD"], k_grid=[1, 2, 3, 5, 10, 20], uniques=[False]),
        record_runs=False,
    )
    pipeline = ScenarioPipeline(config, tmp_path_factory.mktemp("scenarios"), workers=2)
    return {label: pipeline.run(label, 0) for label in ("identity", "swap", "dp")}


def test_scenarios_rank_by_block_precision(scenario_reports):
    identity, swap, dp = (scenario_reports[label] for label in ("identity", "swap", "dp"))
    assert identity.n_true_violating_blocks > 0
    assert identity.block_precision == 1.0

    assert swap.block_precision >= 0.95
    assert swap.block_recall < identity.block_recall

    assert dp.block_precision <= 0.75
    assert len(dp.flagged_blocks) > len(identity.flagged_blocks)


def test_reconstruction_beats_sampling_baseline(scenario_reports):
    identity = scenario_reports["identity"]
    by_k = {}
    for point in identity.curves:
        if point.match_key == "HUD" and not point.uniques_only:
            by_k.setdefault(point.k, {})[point.provenance] = point.precision
    assert sorted(by_k) == [1, 2, 3, 5, 10, 20]
    wins = sum(
        (p[Provenance.SAMPLING_BASELINE] or 0.0) <= (p[Provenance.RECONSTRUCTION] or 0.0) for p in by_k.values()
    )
    assert wins >= 0.8 * len(by_k)
