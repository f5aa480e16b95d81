import logging
import math
import time
from itertools import combinations
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict

from config import AttackConfig
from models import (
    ATTRIBUTE_PRESETS,
    AttackError,
    BedroomClass,
    BlockOutcome,
    BlockStatistics,
    Configuration,
    CountingQuery,
    DEFAULT_RACE_GROUPS,
    DEFAULT_RULE,
    HouseholdSubset,
    Reconstruction,
    Scope,
    SolvarReport,
    SolveStatus,
    StateTables,
    TAIL_START,
    UNIT_BEDROOMS,
    ViolationRule,
    project,
    Weight,
    race_bit,
)
from solver_service import (
    IntegerProgram,
    LinearConstraintRow,
    SolveLimits,
    enumerate_top,
    maximize_l1,
    solve,
)
from workload_service import (
    SIZE_QUERY_SIZES,
    residual_households,
    sf1_race_id,
    size_query_id,
    standard_workload,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration space
# ---------------------------------------------------------------------------

class ConfigurationSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    configurations: Tuple[Configuration, ...]
    race_groups: Tuple[str, ...] = DEFAULT_RACE_GROUPS

    def __len__(self) -> int:
        return len(self.configurations)

    def index(self) -> Dict[Configuration, int]:
        return {g: j for j, g in enumerate(self.configurations)}

    def restricted_to(self, tables: StateTables) -> "ConfigurationSpace":
        """Configurations whose SF1 attributes were seen in the sample (p_census > 0)."""
        kept = tuple(g for g in self.configurations if tables.p_census(g.sf1_key) > 0)
        return self.model_copy(update={"configurations": kept})


def race_patterns(n_groups: int, max_flags: int) -> List[int]:
    patterns = []
    for k in range(1, max_flags + 1):
        for groups in combinations(range(n_groups), k):
            patterns.append(sum(race_bit(i) for i in groups))
    return patterns


def build_space(
    stats: BlockStatistics,
    race_groups: Sequence[str] = DEFAULT_RACE_GROUPS,
    max_household_size: int = 15,
    max_race_flags: int = 1,
) -> ConfigurationSpace:
    """
    Configurations an attacker needs for one block.

    Sizes 1..6 are admitted when their count is positive or some households are
    left unaccounted for by the size counts; sizes 7+ only in the latter case.
    With single-flag race patterns whose race counts cover every household, a
    group with a zero count cannot appear and is left out.
    """
    residual = residual_households(stats)
    sizes = [x for x in SIZE_QUERY_SIZES if stats.answers.get(size_query_id(x), 0) > 0 or residual > 0]
    if residual > 0:
        sizes += list(range(TAIL_START, max_household_size + 1))

    patterns = race_patterns(len(race_groups), max_race_flags)
    race_answers = [stats.answers.get(sf1_race_id(g)) for g in race_groups]
    if max_race_flags == 1 and all(a is not None for a in race_answers) and sum(race_answers) >= stats.n_total:
        patterns = [race_bit(i) for i, a in enumerate(race_answers) if a > 0]

    partitions = []
    if stats.n_total - stats.n_subsidized > 0:
        partitions.append((False, [BedroomClass.NONE]))
    if stats.n_subsidized > 0:
        partitions.append((True, list(UNIT_BEDROOMS)))

    configurations = []
    for subsidized, bedrooms in partitions:
        for size in sizes:
            for flags in patterns:
                for children in range(size + 1):
                    for bedroom in bedrooms:
                        configurations.append(Configuration(size, flags, children, subsidized, int(bedroom)))

    for i, group in enumerate(race_groups):
        answer = stats.answers.get(sf1_race_id(group), 0)
        if answer > 0 and not any(g.race_flags & race_bit(i) for g in configurations):
            raise AttackError(f"block {stats.block_id}: race group {group} has no admissible configuration")
    return ConfigurationSpace(configurations=tuple(configurations), race_groups=tuple(race_groups))


# ---------------------------------------------------------------------------
# Block programs
# ---------------------------------------------------------------------------

def _workload_for(space: ConfigurationSpace, workload: Optional[Sequence[CountingQuery]]) -> Dict[str, CountingQuery]:
    return {q.id: q for q in (workload or standard_workload(space.race_groups))}


def _hud_population_bound(stats: BlockStatistics, max_household_size: int) -> int:
    """Largest total size any n_subsidized households can have under the SF1 size counts."""
    sizes = []
    for x in SIZE_QUERY_SIZES:
        sizes += [x] * stats.answers.get(size_query_id(x), 0)
    sizes += [max_household_size] * residual_households(stats)
    sizes.sort(reverse=True)
    return sum(sizes[:stats.n_subsidized])


def _cardinality_rows(stats: BlockStatistics, space: ConfigurationSpace) -> List[LinearConstraintRow]:
    configurations = space.configurations
    return [
        LinearConstraintRow(coefficients={j: 1 for j in range(len(configurations))},
                            sense="EQ", rhs=stats.n_total, name="n_total"),
        LinearConstraintRow(coefficients={j: 1 for j, g in enumerate(configurations) if g.subsidized},
                            sense="EQ", rhs=stats.n_subsidized, name="n_subsidized"),
    ]


def _query_rows(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    workload: Optional[Sequence[CountingQuery]],
) -> List[LinearConstraintRow]:
    """One row per published statistic, with the sense the attacker uses for it."""
    queries = _workload_for(space, workload)
    max_size = max((g.size for g in space.configurations), default=1)
    rows = []
    for query_id, answer in stats.answers.items():
        query = queries.get(query_id)
        if query is None:
            raise AttackError(f"block {stats.block_id}: unknown statistic {query_id!r}")
        coefficients = {}
        for j, g in enumerate(space.configurations):
            a = query.contribution(g)
            if a:
                coefficients[j] = a
        sense = stats.senses[query_id].value
        rhs = answer
        if query.size is not None and query.weight == Weight.COUNT and query.scope == Scope.ALL:
            # remaining households may take any size
            sense = "GE"
        if query_id == "hud_population":
            rhs = min(answer, _hud_population_bound(stats, max_size))
        rows.append(LinearConstraintRow(coefficients=coefficients, sense=sense, rhs=rhs, name=query_id))
    return rows


def _occupancy_rows(space: ConfigurationSpace, rule: ViolationRule) -> List[LinearConstraintRow]:
    rows = []
    for bedroom in UNIT_BEDROOMS:
        limit = rule.limit(bedroom)
        if limit is None:
            continue
        coefficients = {
            j: 1 for j, g in enumerate(space.configurations)
            if g.subsidized and g.bedroom == bedroom and g.size > limit
        }
        rows.append(LinearConstraintRow(coefficients=coefficients, sense="EQ", rhs=0,
                                        name=f"occupancy_{bedroom.name.lower()}"))
    return rows


def _upper_bounds(stats: BlockStatistics, space: ConfigurationSpace) -> Tuple[int, ...]:
    residual = residual_households(stats)
    upper = []
    for g in space.configurations:
        cap = stats.n_subsidized if g.subsidized else stats.n_total - stats.n_subsidized
        if g.size in SIZE_QUERY_SIZES:
            cap = min(cap, stats.answers.get(size_query_id(g.size), 0) + residual)
        else:
            cap = min(cap, residual)
        upper.append(max(0, cap))
    return tuple(upper)


def build_block_program(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    forbid_violations: bool,
    workload: Optional[Sequence[CountingQuery]] = None,
    rule: ViolationRule = DEFAULT_RULE,
) -> IntegerProgram:
    """
    Histogram program for one block: one count per configuration.

    Args:
        stats: published statistics of the block
        space: admitted configurations
        forbid_violations: add the occupancy rows (no LE1 unit with more than 2
            occupants, no EQ2 unit with more than 4)
        workload: query definitions behind `stats` (standard catalogue by default)

    Returns:
        An IntegerProgram without objective.
    """
    if len(space) == 0:
        raise AttackError(f"block {stats.block_id}: empty configuration space")
    constraints = _cardinality_rows(stats, space) + _query_rows(stats, space, workload)
    if forbid_violations:
        constraints += _occupancy_rows(space, rule)
    return IntegerProgram(
        labels=space.configurations,
        upper=_upper_bounds(stats, space),
        constraints=tuple(constraints),
    )


# ---------------------------------------------------------------------------
# Detection
# ---------------------------------------------------------------------------

def classify_block(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    limits: Optional[SolveLimits] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
) -> BlockOutcome:
    """FLAGGED when no consistent reconstruction is free of violations.

    INCONSISTENT when the statistics admit no reconstruction at all, and
    UNDETERMINED when a solver limit stopped either proof.
    """
    forbidden = solve(build_block_program(stats, space, True, workload), limits)
    if forbidden.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE):
        return BlockOutcome.CLEAR
    if forbidden.status == SolveStatus.BOUND_REACHED:
        logger.info(f"Block {stats.block_id}: detection undetermined after {forbidden.nodes} nodes")
        return BlockOutcome.UNDETERMINED

    relaxed = solve(build_block_program(stats, space, False, workload), limits)
    if relaxed.status == SolveStatus.INFEASIBLE:
        logger.info(f"Block {stats.block_id}: statistics admit no reconstruction")
        return BlockOutcome.INCONSISTENT
    if relaxed.status == SolveStatus.BOUND_REACHED:
        logger.info(f"Block {stats.block_id}: consistency check undetermined after {relaxed.nodes} nodes")
        return BlockOutcome.UNDETERMINED
    return BlockOutcome.FLAGGED


def detect_violation_block(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    limits: Optional[SolveLimits] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
) -> bool:
    return classify_block(stats, space, limits, workload) == BlockOutcome.FLAGGED


# ---------------------------------------------------------------------------
# Reconstruction
# ---------------------------------------------------------------------------

def prior_cost(configuration: Configuration, tables: StateTables) -> float:
    """-log of the sample proportion of the SF1 attributes; smoothed when unseen."""
    p = tables.p_census(configuration.sf1_key)
    if p <= 0:
        p = tables.p_smoothed(configuration.sf1_key)
    return -math.log(p)


def _reconstruction(block_id: str, solution, soft: bool = False) -> Reconstruction:
    counts = {g: n for g, n in solution.counts.items() if isinstance(g, Configuration)}
    return Reconstruction(
        block_id=block_id,
        counts=counts,
        objective=solution.objective_value,
        status=solution.status,
        soft=soft,
    )


def _mle_program(stats, space, prior, workload) -> Tuple[ConfigurationSpace, IntegerProgram]:
    restricted = space.restricted_to(prior)
    if len(restricted) == 0:
        return restricted, None
    program = build_block_program(stats, restricted, False, workload)
    cost = tuple(prior_cost(g, prior) for g in restricted.configurations)
    return restricted, program.model_copy(update={"cost": cost})


def reconstruct_mle(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    prior: StateTables,
    limits: Optional[SolveLimits] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
    soft_lambda: Optional[float] = None,
) -> Reconstruction:
    """
    Most likely reconstruction under the empirical prior, over configurations
    seen in the sample.

    Bedroom and subsidized status carry no cost. An infeasible program yields
    a Reconstruction with status INFEASIBLE and no counts, unless `soft_lambda`
    is given, in which case the soft reconstruction is returned instead.
    """
    _, program = _mle_program(stats, space, prior, workload)
    solution = solve(program, limits) if program is not None else None
    if solution is not None and solution.feasible:
        return _reconstruction(stats.block_id, solution)
    if solution is not None and solution.status == SolveStatus.BOUND_REACHED:
        logger.info(f"Block {stats.block_id}: MLE reconstruction stopped without a solution")
        return Reconstruction(block_id=stats.block_id, counts={}, objective=math.inf,
                              status=SolveStatus.BOUND_REACHED)
    if soft_lambda is not None:
        logger.info(f"Block {stats.block_id}: MLE program infeasible, using soft reconstruction")
        return reconstruct_soft(stats, space, prior, soft_lambda, limits=limits, workload=workload)
    return Reconstruction(block_id=stats.block_id, counts={}, objective=math.inf, status=SolveStatus.INFEASIBLE)


class ReconstructionSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    reconstructions: Tuple[Reconstruction, ...]
    truncated: bool = False
    t_requested: int
    t_used: int


def reconstruct_topt(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    prior: StateTables,
    t: int,
    limits: Optional[SolveLimits] = None,
    node_budget: Optional[int] = None,
    t_floor: Optional[int] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
) -> ReconstructionSet:
    """
    The t most likely reconstructions, in non-decreasing objective order.

    With `t_floor`, a truncated enumeration keeps the largest t / 2^k
    (k >= 1, not below t_floor) prefix it reached instead of reporting truncation.
    """
    _, program = _mle_program(stats, space, prior, workload)
    if program is None:
        return ReconstructionSet(block_id=stats.block_id, reconstructions=(), t_requested=t, t_used=0)
    enumeration = enumerate_top(program, t, limits, node_budget)
    solutions = [s for s in enumeration.solutions if s.status == SolveStatus.OPTIMAL]
    truncated = enumeration.truncated
    t_used = t
    if truncated and t_floor is not None:
        reduced = t
        while reduced // 2 >= t_floor and reduced > len(solutions):
            reduced //= 2
        if len(solutions) >= reduced:
            logger.info(f"Block {stats.block_id}: top-t reduced from {t} to {reduced} within the node budget")
            solutions = solutions[:reduced]
            truncated = False
            t_used = reduced
    if truncated:
        t_used = len(solutions)
    return ReconstructionSet(
        block_id=stats.block_id,
        reconstructions=tuple(_reconstruction(stats.block_id, s) for s in solutions),
        truncated=truncated,
        t_requested=t,
        t_used=t_used,
    )


def reconstruct_soft(
    stats: BlockStatistics,
    space: ConfigurationSpace,
    prior: Optional[StateTables],
    lam: float,
    likelihood: str = "prior",
    limits: Optional[SolveLimits] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
) -> Reconstruction:
    """
    Minimize -log L + lam * sum of squared query errors with the household
    counts kept exact.

    Each unit of deviation k on a query costs lam * (2k - 1), so the convex
    step costs add up to lam * deviation^2. EQ statistics are penalised in both
    directions, GE statistics only when the reconstruction falls short.

    Args:
        likelihood: "prior" for the empirical prior, "zero" for pure noisy
            constraint satisfaction (L contributes nothing)
    """
    if lam < 0:
        raise AttackError(f"lambda must be non-negative, got {lam}")
    if likelihood not in ("prior", "zero"):
        raise AttackError(f"unknown likelihood {likelihood!r}")
    if likelihood == "prior" and prior is None:
        raise AttackError("a prior is required for the prior likelihood")

    base = build_block_program(stats, space, False, workload)
    n = len(space)
    labels = list(space.configurations)
    # only the household counts stay hard
    upper = [stats.n_subsidized if g.subsidized else stats.n_total - stats.n_subsidized for g in labels]
    if likelihood == "prior":
        cost = [prior_cost(g, prior) for g in space.configurations]
    else:
        cost = [0.0] * n
    constraints = list(base.constraints[:2])

    for row in base.constraints[2:]:
        max_value = sum(a * upper[j] for j, a in row.coefficients.items())
        coefficients = dict(row.coefficients)
        shortfall = row.rhs
        excess = max(0, max_value - row.rhs) if row.sense == "EQ" else 0
        for k in range(1, shortfall + 1):
            labels.append(("short", row.name, k))
            upper.append(1)
            cost.append(lam * (2 * k - 1))
            coefficients[len(labels) - 1] = 1
        for k in range(1, excess + 1):
            labels.append(("excess", row.name, k))
            upper.append(1)
            cost.append(lam * (2 * k - 1))
            coefficients[len(labels) - 1] = -1
        if row.sense == "EQ":
            constraints.append(LinearConstraintRow(coefficients=coefficients, sense="EQ", rhs=row.rhs, name=row.name))
        else:
            # GE: expression plus shortfall reaches the answer; surplus is free
            constraints.append(LinearConstraintRow(coefficients=coefficients, sense="GE", rhs=row.rhs, name=row.name))

    program = IntegerProgram(
        labels=tuple(labels), upper=tuple(upper), constraints=tuple(constraints), cost=tuple(cost), n_primary=n,
    )
    solution = solve(program, limits)
    if not solution.feasible:
        raise AttackError(f"block {stats.block_id}: soft reconstruction found no solution ({solution.status.value})")
    return _reconstruction(stats.block_id, solution, soft=True)


# ---------------------------------------------------------------------------
# Solution variability
# ---------------------------------------------------------------------------

def _subset_filter(subset: HouseholdSubset, rule: ViolationRule):
    if subset == HouseholdSubset.SUBSIDIZED:
        return lambda g: g.subsidized
    if subset == HouseholdSubset.VIOLATING:
        return rule.violates_configuration
    return lambda g: True


def solution_variability(
    recon: Reconstruction,
    stats: BlockStatistics,
    space: ConfigurationSpace,
    attrs: Union[str, Tuple[str, ...]] = "full",
    subset: HouseholdSubset = HouseholdSubset.ALL,
    limits: Optional[SolveLimits] = None,
    workload: Optional[Sequence[CountingQuery]] = None,
    rule: ViolationRule = DEFAULT_RULE,
) -> SolvarReport:
    """Largest L1 distance, over the attributes `attrs` and household subset, between
    the reconstruction's histogram and any reconstruction consistent with the statistics."""
    if recon.soft or not recon.counts:
        raise AttackError(f"block {stats.block_id}: solution variability needs a feasible hard reconstruction")
    if isinstance(attrs, str):
        name, attributes = attrs, ATTRIBUTE_PRESETS[attrs]
    else:
        name, attributes = ",".join(attrs), tuple(attrs)

    program = build_block_program(stats, space, False, workload)
    index = space.index()
    reference = [0] * len(space)
    for g, count in recon.counts.items():
        if g not in index:
            raise AttackError(f"block {stats.block_id}: reconstructed configuration {g} is outside the space")
        reference[index[g]] = count

    keep = _subset_filter(subset, rule)
    raw, exact = maximize_l1(program, reference, lambda g: project(g, attributes), keep, limits)
    if subset == HouseholdSubset.ALL:
        denominator = stats.n_total
    elif subset == HouseholdSubset.SUBSIDIZED:
        denominator = stats.n_subsidized
    else:
        denominator = sum(recon.violating(rule).values())
    normalized = raw / (2 * denominator) if denominator else None
    if not exact:
        logger.info(f"Block {stats.block_id}: solution variability {raw} is a lower bound")
    return SolvarReport(block_id=stats.block_id, raw=raw, normalized=normalized, attributes=name,
                        subset=subset, exact=exact)


# ---------------------------------------------------------------------------
# Per-block attack task
# ---------------------------------------------------------------------------

class BlockAttackResult(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    outcome: BlockOutcome
    reconstructions: Tuple[Reconstruction, ...] = ()
    truncated: bool = False
    t_used: int = 0
    solvar: Tuple[SolvarReport, ...] = ()
    seconds: float = 0.0


def attack_block(
    stats: BlockStatistics,
    prior: StateTables,
    config: AttackConfig,
    race_groups: Sequence[str] = DEFAULT_RACE_GROUPS,
    max_household_size: int = 15,
    workload: Optional[Sequence[CountingQuery]] = None,
) -> BlockAttackResult:
    """Detect, then reconstruct flagged (top-t) and inconsistent (soft) blocks."""
    start = time.perf_counter()
    limits = SolveLimits(node_limit=config.node_limit, exact_lp_threshold=config.exact_lp_threshold)
    space = build_space(stats, race_groups, max_household_size, config.max_race_flags)
    outcome = classify_block(stats, space, limits, workload)

    reconstructions: Tuple[Reconstruction, ...] = ()
    truncated = False
    t_used = 0
    if outcome == BlockOutcome.FLAGGED:
        found = reconstruct_topt(
            stats, space, prior, config.t, limits, config.enumeration_node_budget,
            config.t_floor if config.dynamic_t else None, workload,
        )
        reconstructions, truncated, t_used = found.reconstructions, found.truncated, found.t_used
        if not reconstructions:
            soft = reconstruct_soft(stats, space, prior, config.soft_lambda,
                                    "zero" if config.soft_likelihood == "zero" else "prior", limits, workload)
            reconstructions, t_used = (soft,), 1
    elif outcome == BlockOutcome.INCONSISTENT and config.soft_for_inconsistent:
        soft = reconstruct_soft(stats, space, prior, config.soft_lambda,
                                "zero" if config.soft_likelihood == "zero" else "prior", limits, workload)
        reconstructions, t_used = (soft,), 1

    solvar = []
    wants_solvar = config.solvar_scope == "all" or (
        config.solvar_scope == "flagged" and outcome == BlockOutcome.FLAGGED
    )
    if wants_solvar:
        reference = next((r for r in reconstructions if not r.soft), None)
        if reference is None and config.solvar_scope == "all" and outcome == BlockOutcome.CLEAR:
            reference = reconstruct_mle(stats, space, prior, limits, workload)
            if not reference.counts:
                reference = None
        if reference is not None:
            for preset in config.solvar_presets:
                for subset in config.solvar_subsets:
                    solvar.append(solution_variability(reference, stats, space, preset, subset, limits, workload))

    seconds = time.perf_counter() - start
    logger.debug(f"Block {stats.block_id}: {outcome.value}, {len(reconstructions)} reconstructions, {seconds:.2f}s")
    return BlockAttackResult(
        block_id=stats.block_id,
        outcome=outcome,
        reconstructions=reconstructions,
        truncated=truncated,
        t_used=t_used,
        solvar=tuple(solvar),
        seconds=seconds,
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

RECONSTRUCTION_COLUMNS = [
    "block_id", "rank", "size", "race_flag_mask", "children", "subsidized", "bedroom_class",
    "count", "violating", "objective", "status", "soft",
]
SOLVAR_COLUMNS = ["block_id", "attributes", "subset", "raw", "normalized", "exact"]


def write_reconstructions(results: Sequence[BlockAttackResult], path: Path, rule: ViolationRule = DEFAULT_RULE) -> None:
    rows = []
    for result in results:
        for rank, recon in enumerate(result.reconstructions, start=1):
            for g, count in sorted(recon.counts.items()):
                rows.append((
                    recon.block_id, rank, g.size, f"{g.race_flags:x}", g.children, int(g.subsidized), g.bedroom,
                    count, int(rule.violates_configuration(g)), f"{recon.objective:.12g}", recon.status.value,
                    int(recon.soft),
                ))
    pd.DataFrame(rows, columns=RECONSTRUCTION_COLUMNS).to_csv(path, sep="\t", index=False)


def read_reconstructions(path: Path) -> Dict[str, List[Reconstruction]]:
    frame = pd.read_csv(path, sep="\t", dtype={"block_id": str, "race_flag_mask": str, "status": str})
    result: Dict[str, List[Reconstruction]] = {}
    for (block_id, rank), rows in frame.groupby(["block_id", "rank"], sort=False):
        first = rows.iloc[0]
        counts = {
            Configuration(int(r.size), int(r.race_flag_mask, 16), int(r.children), bool(r.subsidized),
                          int(r.bedroom_class)): int(r.count)
            for r in rows.itertuples(index=False)
        }
        result.setdefault(block_id, []).append(Reconstruction(
            block_id=block_id, counts=counts, objective=float(first.objective),
            status=SolveStatus(first.status), soft=bool(first.soft),
        ))
    return result


def write_solvar(results: Sequence[BlockAttackResult], path: Path) -> None:
    rows = [
        (r.block_id, r.attributes, r.subset.value, r.raw,
         "" if r.normalized is None else f"{r.normalized:.12g}", int(r.exact))
        for result in results for r in result.solvar
    ]
    pd.DataFrame(rows, columns=SOLVAR_COLUMNS).to_csv(path, sep="\t", index=False)


def write_outcomes(results: Sequence[BlockAttackResult], path: Path) -> None:
    rows = [(r.block_id, r.outcome.value, len(r.reconstructions), r.t_used, int(r.truncated)) for r in results]
    pd.DataFrame(rows, columns=["block_id", "outcome", "n_reconstructions", "t_used", "truncated"]).to_csv(
        path, sep="\t", index=False
    )


def read_outcomes(path: Path) -> Dict[str, Tuple[BlockOutcome, int, bool]]:
    frame = pd.read_csv(path, sep="\t", dtype={"block_id": str, "outcome": str})
    return {
        r.block_id: (BlockOutcome(r.outcome), int(r.t_used), bool(r.truncated))
        for r in frame.itertuples(index=False)
    }


def read_solvar(path: Path) -> Dict[str, List[SolvarReport]]:
    frame = pd.read_csv(path, sep="\t", dtype={"block_id": str, "attributes": str, "subset": str})
    result: Dict[str, List[SolvarReport]] = {}
    for r in frame.itertuples(index=False):
        result.setdefault(r.block_id, []).append(SolvarReport(
            block_id=r.block_id, raw=int(r.raw), normalized=None if pd.isna(r.normalized) else float(r.normalized),
            attributes=r.attributes, subset=HouseholdSubset(r.subset), exact=bool(r.exact),
        ))
    return result


def read_attack_results(outcomes: Path, reconstructions: Path, solvar: Path) -> List[BlockAttackResult]:
    """Rebuild per-block results from the attack stage's files, in outcome-file order."""
    recons = read_reconstructions(reconstructions)
    reports = read_solvar(solvar)
    return [
        BlockAttackResult(
            block_id=block_id, outcome=outcome, reconstructions=tuple(recons.get(block_id, ())),
            truncated=truncated, t_used=t_used, solvar=tuple(reports.get(block_id, ())),
        )
        for block_id, (outcome, t_used, truncated) in read_outcomes(outcomes).items()
    ]
