from sqlalchemy.orm import Session
from sqlalchemy.exc import IntegrityError
from typing import List, Optional, Sequence
import logging

import pandas as pd

import database
from evaluation_service import SUMMARY_COLUMNS, metric_rows
from models import AttackReport, MetricRecord, ScenarioRun

logger = logging.getLogger(__name__)


def run_key(scenario: str, seed: int, config_hash: str) -> str:
    return f"{scenario}/{seed}/{config_hash}"


def _session() -> Session:
    if database.SessionLocal is None:
        database.configure_database(database.get_database_url())
    return database.SessionLocal()


def record_run(
    report: Optional[AttackReport],
    scenario: str,
    seed: int,
    config_hash: str,
    output_dir: str,
    status: str = "COMPLETED",
) -> dict:
    """
    Store one scenario run and its metric rows in the run registry.

    Re-recording the same (scenario, seed, config hash) replaces the earlier row.

    Returns:
        dict: counts of saved, replaced and failed metric rows plus the run key
    """
    db = _session()
    key = run_key(scenario, seed, config_hash)
    saved_count = 0
    replaced = 0
    failed_count = 0

    try:
        existing = db.query(ScenarioRun).filter(ScenarioRun.run_key == key).first()
        if existing:
            logger.info(f"Replacing recorded run: {key}")
            db.query(MetricRecord).filter(MetricRecord.run_id == existing.id).delete()
            db.delete(existing)
            db.commit()
            replaced = 1

        run = ScenarioRun(
            run_key=key,
            scenario=scenario,
            seed=seed,
            config_hash=config_hash,
            status=status,
            output_dir=output_dir,
            block_precision=report.block_precision if report else None,
            block_recall=report.block_recall if report else None,
            n_flagged=len(report.flagged_blocks) if report else 0,
        )
        db.add(run)
        db.commit()
        db.refresh(run)

        for _, _, provenance, match_key, uniques_only, k, metric, value in (metric_rows(report) if report else []):
            try:
                db.add(MetricRecord(
                    run_id=run.id,
                    provenance=provenance,
                    match_key=match_key,
                    uniques_only=uniques_only,
                    k=k,
                    metric=metric,
                    value=None if value is None else float(value),
                ))
                db.commit()
                saved_count += 1
            except IntegrityError:
                db.rollback()
                logger.warning(f"Duplicate metric row skipped: {key} {provenance} {match_key} k={k} {metric}")
                failed_count += 1

        logger.info(f"Recorded run {key}: {saved_count} metric rows")
        return {"run_key": key, "saved": saved_count, "replaced": replaced, "failed": failed_count}

    except Exception as e:
        db.rollback()
        logger.error(f"Failed to record run {key}: {str(e)}", exc_info=True)
        raise
    finally:
        db.close()


def get_runs(db: Session, scenario: Optional[str] = None) -> List[ScenarioRun]:
    query = db.query(ScenarioRun)
    if scenario is not None:
        query = query.filter(ScenarioRun.scenario == scenario)
    return query.order_by(ScenarioRun.scenario, ScenarioRun.seed).all()


def get_metrics(db: Session, run: ScenarioRun, metric: Optional[str] = None) -> List[MetricRecord]:
    query = db.query(MetricRecord).filter(MetricRecord.run_id == run.id)
    if metric is not None:
        query = query.filter(MetricRecord.metric == metric)
    return query.order_by(MetricRecord.provenance, MetricRecord.match_key, MetricRecord.uniques_only,
                          MetricRecord.k).all()


def comparison_table(scenarios: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Summary rows for every completed run in the registry, in the summary file's column order."""
    db = _session()
    try:
        rows = []
        for run in get_runs(db):
            if run.status != "COMPLETED" or (scenarios and run.scenario not in scenarios):
                continue
            block = {m.metric: m.value for m in get_metrics(db, run) if m.provenance == "BLOCK"}
            rows.append((
                run.scenario, run.seed, block.get("n_blocks"), run.n_flagged,
                block.get("true_violating_blocks"), run.block_precision, run.block_recall,
                block.get("inconsistent_blocks"), block.get("undetermined_blocks"),
                block.get("true_violations"), block.get("violation_correlation"),
            ))
        logger.info(f"Comparison table with {len(rows)} runs")
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)
    finally:
        db.close()
