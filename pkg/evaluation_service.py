import logging
from collections import Counter, defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import pandas as pd

from attack_service import BlockAttackResult
from config import EvaluationConfig
from models import (
    AttackReport,
    BlockOutcome,
    Configuration,
    CurvePoint,
    DEFAULT_RULE,
    EvaluationError,
    MATCH_KEY_PRESETS,
    MatchKey,
    Provenance,
    RankedCandidates,
    Reconstruction,
    Universe,
    ViolationRule,
    project,
)
from parallel import STREAM_BASELINE, derive_rng

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ["scenario", "seed", "provenance", "match_key", "uniques_only", "k", "metric", "value"]
SUMMARY_COLUMNS = [
    "scenario", "seed", "n_blocks", "flagged_blocks", "true_violating_blocks", "block_precision",
    "block_recall", "inconsistent_blocks", "undetermined_blocks", "true_violations", "violation_correlation",
]


# ---------------------------------------------------------------------------
# Ground truth
# ---------------------------------------------------------------------------

def build_match_key(universe: Universe, name: str, attributes: Optional[Tuple[str, ...]] = None) -> MatchKey:
    """Identified partial records: every household projected onto the key's attributes."""
    if attributes is None:
        if name not in MATCH_KEY_PRESETS:
            raise EvaluationError(f"unknown match key {name!r}")
        attributes = MATCH_KEY_PRESETS[name]
    records, block_of = {}, {}
    for block in universe.blocks:
        for i, h in enumerate(block.households):
            hid = block.household_id(i)
            records[hid] = project(h.configuration, attributes)
            block_of[hid] = block.block_id
    return MatchKey(name=name, attributes=tuple(attributes), records=records, block_of=block_of)


def true_violations(universe: Universe, rule: ViolationRule = DEFAULT_RULE) -> Set[str]:
    return {
        block.household_id(i)
        for block in universe.blocks
        for i, h in enumerate(block.households)
        if rule.violates(h)
    }


def violating_blocks(universe: Universe, rule: ViolationRule = DEFAULT_RULE) -> Set[str]:
    return {b.block_id for b in universe.blocks if any(rule.violates(h) for h in b.households)}


def population_uniques(key: MatchKey) -> Set[str]:
    """Households whose key projection is unique within their block."""
    counts = Counter((key.block_of[hid], projection) for hid, projection in key.records.items())
    return {hid for hid, projection in key.records.items() if counts[(key.block_of[hid], projection)] == 1}


# ---------------------------------------------------------------------------
# Rankings
# ---------------------------------------------------------------------------

def _ranked(scores: Dict[tuple, float], provenance: Provenance) -> RankedCandidates:
    entries = sorted(scores.items(), key=lambda item: (-item[1], item[0]))
    return RankedCandidates(entries=tuple((p, float(s)) for p, s in entries), provenance=provenance)


def rank_from_reconstructions(
    recons: Sequence[Reconstruction],
    attributes: Tuple[str, ...],
    rule: ViolationRule = DEFAULT_RULE,
) -> RankedCandidates:
    """Projections scored by violating count mass across the reconstructions; ties in lexicographic order."""
    if not recons:
        raise EvaluationError("a ranking needs at least one reconstruction")
    if len({r.block_id for r in recons}) != 1:
        raise EvaluationError("reconstructions of different blocks cannot be ranked together")
    scores: Dict[tuple, float] = defaultdict(float)
    for recon in recons:
        for g, count in recon.violating(rule).items():
            scores[project(g, attributes)] += count
    return _ranked(scores, Provenance.RECONSTRUCTION)


def baseline_sample(universe: Universe, fraction: float, seed: int,
                    rule: ViolationRule = DEFAULT_RULE) -> List[Configuration]:
    """Violating households in a per-state `fraction` sample of the ground truth."""
    by_state: Dict[str, List[Configuration]] = defaultdict(list)
    for block in universe.blocks:
        by_state[block.geo_state].extend(h.configuration for h in block.households)
    sample = []
    for index, geo_state in enumerate(sorted(by_state)):
        households = by_state[geo_state]
        size = int(round(fraction * len(households)))
        if size == 0:
            continue
        rng = derive_rng(seed, STREAM_BASELINE, index)
        chosen = sorted(int(i) for i in rng.choice(len(households), size=size, replace=False))
        sample.extend(households[i] for i in chosen if rule.violates_configuration(households[i]))
    return sample


def sampling_baseline(sample: Iterable[Configuration], attributes: Tuple[str, ...],
                      rule: ViolationRule = DEFAULT_RULE) -> RankedCandidates:
    """Global ranking of how often each projection appears in violation in the sample."""
    scores: Dict[tuple, float] = defaultdict(float)
    for g in sample:
        if rule.violates_configuration(g):
            scores[project(g, attributes)] += 1
    return _ranked(scores, Provenance.SAMPLING_BASELINE)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def putative_violations(
    ranking: RankedCandidates,
    key: MatchKey,
    k: int,
    blocks: Set[str],
    uniques_only: bool = False,
    uniques: Optional[Set[str]] = None,
) -> Set[str]:
    """Households in `blocks` whose key projection is among the top-k ranked configurations."""
    if k < 1:
        raise EvaluationError(f"k must be positive, got {k}")
    top = set(ranking.top(k))
    if uniques_only and uniques is None:
        uniques = population_uniques(key)
    return {
        hid for hid, projection in key.records.items()
        if key.block_of[hid] in blocks and projection in top and (not uniques_only or hid in uniques)
    }


def match_rate(ranking: RankedCandidates, k: int, true_projections: Set[tuple]) -> Tuple[int, int]:
    """(matches, considered) among the top-k ranked configurations."""
    top = ranking.top(k)
    return sum(1 for p in top if p in true_projections), len(top)


def score(
    v_hat: Set[str],
    truth: Set[str],
    ranking: Optional[RankedCandidates] = None,
    k: Optional[int] = None,
    true_projections: Optional[Set[tuple]] = None,
) -> Tuple[Optional[float], Optional[float], Optional[float]]:
    """
    Precision |V & V_hat| / |V_hat|, recall |V & V_hat| / |V| and match rate.

    Returns:
        (precision, recall, match_rate); precision is None for an empty V_hat,
        recall None for an empty V, match rate None without a ranking or when
        nothing was ranked.
    """
    overlap = len(v_hat & truth)
    precision = overlap / len(v_hat) if v_hat else None
    if truth:
        recall = overlap / len(truth)
    else:
        logger.info("No true violations: recall undefined")
        recall = None
    rate = None
    if ranking is not None and k is not None:
        matches, considered = match_rate(ranking, k, true_projections or set())
        rate = matches / considered if considered else None
    return precision, recall, rate


def block_metrics(flagged: Set[str], truth: Universe,
                  rule: ViolationRule = DEFAULT_RULE) -> Tuple[Optional[float], Optional[float]]:
    true_blocks = violating_blocks(truth, rule)
    overlap = len(flagged & true_blocks)
    precision = overlap / len(flagged) if flagged else None
    recall = overlap / len(true_blocks) if true_blocks else None
    return precision, recall


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _curve(
    provenance: Provenance,
    key: MatchKey,
    rankings: Dict[str, RankedCandidates],
    truth: Set[str],
    uniques_only: bool,
    uniques: Set[str],
    k_grid: Sequence[int],
) -> List[CurvePoint]:
    if uniques_only:
        truth = truth & uniques
    true_by_block: Dict[str, Set[tuple]] = defaultdict(set)
    for hid in truth:
        true_by_block[key.block_of[hid]].add(key.records[hid])

    points = []
    for k in k_grid:
        v_hat: Set[str] = set()
        matches = considered = 0
        for block_id, ranking in rankings.items():
            v_hat |= putative_violations(ranking, key, k, {block_id}, uniques_only, uniques)
            m, c = match_rate(ranking, k, true_by_block[block_id])
            matches += m
            considered += c
        precision, recall, _ = score(v_hat, truth)
        points.append(CurvePoint(
            provenance=provenance,
            match_key=key.name,
            uniques_only=uniques_only,
            k=k,
            precision=precision,
            recall=recall,
            match_rate=matches / considered if considered else None,
            n_putative=len(v_hat),
            n_true=len(truth),
        ))
    return points


def build_report(
    scenario: str,
    seed: int,
    universe: Universe,
    results: Sequence[BlockAttackResult],
    config: EvaluationConfig,
    rule: ViolationRule = DEFAULT_RULE,
) -> AttackReport:
    """
    Score one scenario run against the ground truth.

    Block-level metrics use the FLAGGED outcomes; household-level curves use
    the reconstructions of flagged blocks, and the sampling baseline applies
    one global ranking to the same blocks.
    """
    flagged = {r.block_id for r in results if r.outcome == BlockOutcome.FLAGGED}
    block_precision, block_recall = block_metrics(flagged, universe, rule)
    truth = true_violations(universe, rule)
    by_block = {r.block_id: r for r in results}

    sample = baseline_sample(universe, config.baseline_sample_fraction, seed, rule) if config.baseline else []
    curves: List[CurvePoint] = []
    for name in config.match_keys:
        key = build_match_key(universe, name)
        uniques = population_uniques(key)
        rankings = {
            block_id: rank_from_reconstructions(by_block[block_id].reconstructions, key.attributes, rule)
            for block_id in sorted(flagged) if by_block[block_id].reconstructions
        }
        baseline = sampling_baseline(sample, key.attributes, rule) if config.baseline else None
        for uniques_only in config.uniques:
            curves += _curve(Provenance.RECONSTRUCTION, key, rankings, truth, uniques_only, uniques, config.k_grid)
            if baseline is not None:
                shared = {block_id: baseline for block_id in sorted(flagged)}
                curves += _curve(Provenance.SAMPLING_BASELINE, key, shared, truth, uniques_only, uniques,
                                 config.k_grid)

    violation_counts = []
    for block_id in sorted(flagged):
        recons = by_block[block_id].reconstructions
        putative = sum(recons[0].violating(rule).values()) if recons else 0
        actual = sum(1 for h in universe.block(block_id).households if rule.violates(h))
        violation_counts.append((block_id, putative, actual))

    outcomes = Counter(r.outcome for r in results)
    report = AttackReport(
        scenario=scenario,
        seed=seed,
        flagged_blocks=tuple(sorted(flagged)),
        n_blocks=len(universe.blocks),
        n_true_violating_blocks=len(violating_blocks(universe, rule)),
        n_inconsistent_blocks=outcomes[BlockOutcome.INCONSISTENT],
        n_undetermined_blocks=outcomes[BlockOutcome.UNDETERMINED],
        block_precision=block_precision,
        block_recall=block_recall,
        n_true_violations=len(truth),
        curves=tuple(curves),
        solvar=tuple(s for r in results for s in r.solvar),
        violation_counts=tuple(violation_counts),
    )
    logger.info(
        f"Scenario {scenario} seed {seed}: flagged {len(flagged)}/{report.n_blocks} blocks, "
        f"block precision {block_precision}, block recall {block_recall}"
    )
    return report


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def metric_rows(report: AttackReport) -> List[Tuple]:
    block_level = {
        "n_blocks": report.n_blocks,
        "block_precision": report.block_precision,
        "block_recall": report.block_recall,
        "flagged_blocks": len(report.flagged_blocks),
        "true_violating_blocks": report.n_true_violating_blocks,
        "inconsistent_blocks": report.n_inconsistent_blocks,
        "undetermined_blocks": report.n_undetermined_blocks,
        "true_violations": report.n_true_violations,
        "violation_correlation": report.violation_correlation(),
    }
    rows = [(report.scenario, report.seed, "BLOCK", "", 0, 0, name, value) for name, value in block_level.items()]
    for p in report.curves:
        for metric in ("precision", "recall", "match_rate", "n_putative", "n_true"):
            rows.append((report.scenario, report.seed, p.provenance.value, p.match_key, int(p.uniques_only), p.k,
                         metric, getattr(p, metric)))
    return rows


def write_metrics(reports: Sequence[AttackReport], path: Path) -> None:
    rows = [row[:-1] + (_fmt(row[-1]),) for report in reports for row in metric_rows(report)]
    pd.DataFrame(rows, columns=METRICS_COLUMNS).to_csv(path, sep="\t", index=False)


def summary_row(report: AttackReport) -> Tuple:
    return (
        report.scenario, report.seed, report.n_blocks, len(report.flagged_blocks),
        report.n_true_violating_blocks, report.block_precision, report.block_recall,
        report.n_inconsistent_blocks, report.n_undetermined_blocks, report.n_true_violations,
        report.violation_correlation(),
    )


def write_summary(reports: Sequence[AttackReport], path: Path) -> None:
    rows = [tuple(_fmt(v) for v in summary_row(r)) for r in reports]
    pd.DataFrame(rows, columns=SUMMARY_COLUMNS).to_csv(path, sep="\t", index=False)


def write_report(report: AttackReport, path: Path) -> None:
    Path(path).write_text(report.model_dump_json(indent=1))


def read_report(path: Path) -> AttackReport:
    try:
        return AttackReport.model_validate_json(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise EvaluationError(f"cannot read report {path}: {e}") from e
