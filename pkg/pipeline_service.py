import json
import logging
import platform
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

import database
import results_service
from attack_service import (
    BlockAttackResult,
    attack_block,
    read_attack_results,
    write_outcomes,
    write_reconstructions,
    write_solvar,
)
from config import ScenarioConfig, dump_config
from evaluation_service import (
    SUMMARY_COLUMNS,
    build_report,
    read_report,
    summary_row,
    write_metrics,
    write_report,
    write_summary,
)
from generator_service import (
    block_state,
    build_empirical_distribution,
    generate_universe,
    read_empirical_distribution,
    read_universe,
    violation_rate,
    write_empirical_distribution,
    write_universe,
)
from mechanism_service import publish
from models import AttackReport, BlockOutcome, BlockStatistics, StageError, Universe
from parallel import STREAM_BASELINE, STREAM_BLOCK, STREAM_DP, STREAM_REFERENCE, STREAM_SWAP, parallel_map
from plot_service import emit_plots
from workload_service import evaluate_universe, read_statistics, standard_workload, write_statistics

logger = logging.getLogger(__name__)

LAB_VERSION = "0.1.0"
FAILED_MARKER = "FAILED"
MANIFEST = "manifest.json"
PACKAGES = ("numpy", "scipy", "pandas", "pydantic", "sqlalchemy", "matplotlib")

# per-seed files shared by every scenario
UNIVERSE_FILE = "universe.tsv"
EMPIRICAL_FILE = "empirical.json"
# per-scenario files
TRUTH_FILE = "statistics_truth.tsv"
PUBLISHED_FILE = "statistics_published.tsv"
OUTCOMES_FILE = "outcomes.tsv"
RECONSTRUCTIONS_FILE = "reconstructions.tsv"
SOLVAR_FILE = "solvar.tsv"
METRICS_FILE = "metrics.tsv"
SUMMARY_FILE = "summary.tsv"
REPORT_FILE = "report.json"
# sweep-level files
COMPARISON_FILE = "comparison.tsv"
PLOTS_DIR = "plots"


def _attack_task(task) -> BlockAttackResult:
    stats, prior, attack, race_groups, max_household_size, workload = task
    return attack_block(stats, prior, attack, race_groups, max_household_size, workload)


def _package_versions() -> Dict[str, str]:
    versions = {}
    for name in PACKAGES:
        try:
            versions[name] = version(name)
        except PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class ScenarioPipeline:
    """
    Runs scenarios stage by stage: generate -> publish -> attack -> evaluate.

    Layout under `output_dir`:
        seed_<seed>/            universe and empirical tables shared by scenarios
        <label>/seed_<seed>/    statistics, attack files, metrics, manifest
        comparison.tsv, plots/  written by sweep and report
    """

    def __init__(self, config: ScenarioConfig, output_dir: Path, workers: int = 1):
        self.config = config
        self.output_dir = Path(output_dir)
        self.workers = workers
        self.workload = standard_workload(config.generation.race_groups,
                                          hud_complete=config.generation.response_rate >= 1.0)
        self._universes: Dict[int, Universe] = {}
        self._timings: Dict[str, float] = {}
        self.output_dir.mkdir(parents=True, exist_ok=True)
        if config.record_runs:
            database.configure_database(database.get_database_url(str(self.output_dir)))

    def seed_dir(self, seed: int) -> Path:
        return self.output_dir / f"seed_{seed}"

    def run_dir(self, label: str, seed: int) -> Path:
        return self.output_dir / label / f"seed_{seed}"

    def _stage(self, name: str, fn, *args, **kwargs):
        logger.info(f"Stage {name} starting")
        start = time.perf_counter()
        try:
            result = fn(*args, **kwargs)
        except StageError:
            raise
        except Exception as e:
            logger.error(f"Stage {name} failed: {str(e)}", exc_info=True)
            raise StageError(name, e) from e
        seconds = time.perf_counter() - start
        self._timings[name] = self._timings.get(name, 0.0) + seconds
        logger.info(f"Stage {name} finished in {seconds:.2f}s")
        return result

    # -----------------------------------------------------------------------
    # Stages
    # -----------------------------------------------------------------------

    def _generate(self, seed: int) -> Universe:
        target = self.seed_dir(seed)
        target.mkdir(parents=True, exist_ok=True)
        dist = build_empirical_distribution(self.config.generation, seed)
        universe = generate_universe(self.config.generation, dist, seed, self.workers)
        write_empirical_distribution(dist, target / EMPIRICAL_FILE)
        write_universe(universe, target / UNIVERSE_FILE)
        logger.info(
            f"Seed {seed}: {len(universe.blocks)} blocks, "
            f"{sum(b.n_total for b in universe.blocks)} households, "
            f"violation rate among subsidized {violation_rate(universe):.4f}"
        )
        self._universes[seed] = universe
        return universe

    def generate(self, seed: int) -> Universe:
        return self._stage("generate", self._generate, seed)

    def load_universe(self, seed: int) -> Universe:
        return self._stage("generate", self._universe_for, seed)

    def _universe_for(self, seed: int) -> Universe:
        """Universe for `seed`: cached, read back from disk, or generated."""
        if seed in self._universes:
            return self._universes[seed]
        target = self.seed_dir(seed)
        if (target / UNIVERSE_FILE).exists() and (target / EMPIRICAL_FILE).exists():
            dist = read_empirical_distribution(target / EMPIRICAL_FILE)
            self._universes[seed] = read_universe(target / UNIVERSE_FILE, dist)
            logger.info(f"Loaded universe for seed {seed} from {target}")
            return self._universes[seed]
        return self._generate(seed)

    def _publish(self, label: str, seed: int) -> List[BlockStatistics]:
        universe = self._universe_for(seed)
        mechanism = self.config.scenario(label).mechanism
        target = self.run_dir(label, seed)
        target.mkdir(parents=True, exist_ok=True)

        truth = evaluate_universe(universe, self.workload, workers=self.workers)
        write_statistics(truth, target / TRUTH_FILE, {"mechanism": "none", "seed": seed})
        published, provenance = publish(universe, mechanism, self.workload, seed, self.workers)
        write_statistics(published, target / PUBLISHED_FILE, provenance)
        logger.info(f"Published {len(published)} blocks for {label} (mechanism {mechanism.kind})")
        return published

    def publish(self, label: str, seed: int) -> List[BlockStatistics]:
        return self._stage("publish", self._publish, label, seed)

    def _attack(self, label: str, seed: int, statistics: Optional[List[BlockStatistics]]) -> List[BlockAttackResult]:
        target = self.run_dir(label, seed)
        if statistics is None:
            statistics, _ = read_statistics(target / PUBLISHED_FILE)
        # the attacker sees only the published statistics and the public sample tables
        dist = read_empirical_distribution(self.seed_dir(seed) / EMPIRICAL_FILE)
        generation = self.config.generation
        tasks = [
            (stats, dist.for_state(block_state(stats.block_id)), self.config.attack, list(dist.race_groups),
             generation.max_household_size, self.workload)
            for stats in statistics
        ]
        results = parallel_map(_attack_task, tasks, self.workers)

        write_outcomes(results, target / OUTCOMES_FILE)
        write_reconstructions(results, target / RECONSTRUCTIONS_FILE)
        write_solvar(results, target / SOLVAR_FILE)
        counts = {o.value: sum(1 for r in results if r.outcome == o) for o in BlockOutcome}
        truncated = sum(1 for r in results if r.truncated)
        logger.info(f"Attack on {label} seed {seed}: {counts}, {truncated} truncated enumerations, "
                    f"{sum(r.seconds for r in results):.1f}s solver time")
        return results

    def attack(self, label: str, seed: int,
               statistics: Optional[List[BlockStatistics]] = None) -> List[BlockAttackResult]:
        return self._stage("attack", self._attack, label, seed, statistics)

    def _evaluate(self, label: str, seed: int, results: Optional[List[BlockAttackResult]]) -> AttackReport:
        target = self.run_dir(label, seed)
        if results is None:
            results = read_attack_results(target / OUTCOMES_FILE, target / RECONSTRUCTIONS_FILE, target / SOLVAR_FILE)
        universe = self._universe_for(seed)
        report = build_report(label, seed, universe, results, self.config.evaluation)
        write_metrics([report], target / METRICS_FILE)
        write_summary([report], target / SUMMARY_FILE)
        write_report(report, target / REPORT_FILE)
        return report

    def evaluate(self, label: str, seed: int, results: Optional[List[BlockAttackResult]] = None) -> AttackReport:
        return self._stage("evaluate", self._evaluate, label, seed, results)

    # -----------------------------------------------------------------------
    # Runs
    # -----------------------------------------------------------------------

    def _manifest(self, label: str, seed: int, status: str, failure: Optional[StageError] = None) -> dict:
        return {
            "lab_version": LAB_VERSION,
            "python": platform.python_version(),
            "packages": _package_versions(),
            "scenario": label,
            "mechanism": self.config.scenario(label).mechanism.kind,
            "seed": seed,
            "streams": {
                "reference": STREAM_REFERENCE, "block": STREAM_BLOCK, "swap": STREAM_SWAP,
                "dp": STREAM_DP, "baseline": STREAM_BASELINE,
            },
            "config_hash": self.config.config_hash(),
            "workers": self.workers,
            "status": status,
            "failed_stage": failure.stage if failure else None,
            "timings": {name: round(seconds, 3) for name, seconds in self._timings.items()},
        }

    def _record(self, report: Optional[AttackReport], label: str, seed: int, status: str) -> None:
        if not self.config.record_runs:
            return
        try:
            results_service.record_run(report, label, seed, self.config.config_hash(),
                                       str(self.run_dir(label, seed)), status)
        except Exception as e:
            logger.error(f"Run registry update failed for {label}/{seed}: {str(e)}", exc_info=True)

    def run(self, label: str, seed: int) -> AttackReport:
        """
        Execute every stage for one scenario and seed.

        Raises:
            StageError: a stage failed; partial outputs stay on disk next to a FAILED marker
        """
        target = self.run_dir(label, seed)
        target.mkdir(parents=True, exist_ok=True)
        (target / FAILED_MARKER).unlink(missing_ok=True)
        self._timings = {}
        logger.info(f"Running scenario {label} with seed {seed}")

        try:
            self.load_universe(seed)
            statistics = self.publish(label, seed)
            results = self.attack(label, seed, statistics)
            report = self.evaluate(label, seed, results)
        except StageError as e:
            (target / FAILED_MARKER).write_text(f"stage={e.stage}\n{e.cause}\n")
            (target / MANIFEST).write_text(json.dumps(self._manifest(label, seed, "FAILED", e), indent=2))
            self._record(None, label, seed, "FAILED")
            raise

        (target / MANIFEST).write_text(json.dumps(self._manifest(label, seed, "COMPLETED"), indent=2))
        self._record(report, label, seed, "COMPLETED")
        return report

    def _labels(self, labels: Optional[Sequence[str]]) -> List[str]:
        if labels:
            for label in labels:
                self.config.scenario(label)
            return list(labels)
        return [s.label for s in self.config.scenarios]

    def sweep(self, seeds: Optional[Sequence[int]] = None, labels: Optional[Sequence[str]] = None) -> List[AttackReport]:
        """All scenarios over all seeds, then the comparison table and plots."""
        dump_config(self.config, self.output_dir / "config.json")
        reports = [
            self.run(label, seed)
            for seed in (seeds or self.config.seeds)
            for label in self._labels(labels)
        ]
        self._stage("report", self._write_comparison, reports)
        return reports

    def _write_comparison(self, reports: Sequence[AttackReport]) -> pd.DataFrame:
        write_summary(reports, self.output_dir / COMPARISON_FILE)
        write_metrics(reports, self.output_dir / METRICS_FILE)
        if reports:
            emit_plots(reports, self.output_dir / PLOTS_DIR)
        return pd.DataFrame([summary_row(r) for r in reports], columns=SUMMARY_COLUMNS)

    def report(self, from_store: bool = False, seeds: Optional[Sequence[int]] = None,
               labels: Optional[Sequence[str]] = None) -> pd.DataFrame:
        """Comparison table from the run registry or from the report files on disk."""
        if from_store:
            table = results_service.comparison_table(self._labels(labels))
            table.to_csv(self.output_dir / COMPARISON_FILE, sep="\t", index=False)
            return table

        reports = []
        for seed in seeds or self.config.seeds:
            for label in self._labels(labels):
                path = self.run_dir(label, seed) / REPORT_FILE
                if path.exists():
                    reports.append(read_report(path))
                else:
                    logger.warning(f"No report for {label} seed {seed} at {path}")
        return self._stage("report", self._write_comparison, reports)
