import logging
from collections import Counter, defaultdict
from fractions import Fraction
from math import prod
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from config import MechanismConfig
from dgauss import discrete_gaussian
from models import (
    BlockStatistics,
    BudgetAllocationError,
    CountingQuery,
    DEFAULT_RACE_GROUPS,
    MechanismError,
    PrivacyBudget,
    SwapConfig,
    Universe,
)
from parallel import STREAM_DP, STREAM_SWAP, derive_rng, parallel_map
from workload_service import (
    RESIDUAL_ID,
    SIZE_QUERY_SIZES,
    evaluate_universe,
    is_sf1,
    residual_households,
    sf1_race_id,
    size_query_id,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Swapping
# ---------------------------------------------------------------------------

class SwapSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    households: int
    selected: int
    performed: int
    skipped: int

    @property
    def selected_rate(self) -> float:
        return self.selected / self.households if self.households else 0.0


def expected_swap_rate(cfg: SwapConfig) -> float:
    """Sum of tier width times (capped) tier probability."""
    rate, previous = 0.0, 0.0
    for boundary, probability in cfg.tiers:
        rate += (boundary - previous) * min(1.0, probability * cfg.multiplier)
        previous = boundary
    return rate


def _swap_key(record, key: str) -> Tuple[int, int]:
    if key == "size_children":
        return record.size, record.children
    return record.size, record.adults


def _tier_probability(rank: int, total: int, cfg: SwapConfig) -> float:
    position = rank / total
    for boundary, probability in cfg.tiers:
        if position < boundary:
            return min(1.0, probability * cfg.multiplier)
    return min(1.0, cfg.tiers[-1][1] * cfg.multiplier)


def _swap_state(blocks: List, cfg: SwapConfig, rng: np.random.Generator) -> Tuple[List, Counter]:
    """Swap within one state's blocks; returns updated household tuples per block and counters."""
    households = [list(b.households) for b in blocks]
    refs = [(bi, hi) for bi, b in enumerate(blocks) for hi in range(len(b.households))]
    stats = Counter(households=len(refs))
    if not refs:
        return households, stats

    uniqueness = Counter(households[bi][hi].configuration for bi, hi in refs)
    order = sorted(
        refs,
        key=lambda r: (
            uniqueness[households[r[0]][r[1]].configuration],
            blocks[r[0]].n_total,
            blocks[r[0]].block_id,
            r[1],
        ),
    )
    draws = rng.random(len(order))
    selected = [ref for rank, ref in enumerate(order) if draws[rank] < _tier_probability(rank, len(order), cfg)]
    stats["selected"] = len(selected)

    by_key: Dict[Tuple[int, int], List[Tuple[int, int]]] = defaultdict(list)
    for bi, hi in refs:
        by_key[_swap_key(households[bi][hi], cfg.swap_key)].append((bi, hi))
    positions = np.array([b.position for b in blocks], dtype=float)

    # a household takes part in at most one exchange
    exchanged = set()
    for bi, hi in selected:
        if (bi, hi) in exchanged:
            continue
        record = households[bi][hi]
        partners = [
            (pb, ph) for pb, ph in by_key[_swap_key(record, cfg.swap_key)]
            if pb != bi and (pb, ph) not in exchanged
        ]
        if not partners:
            logger.debug(f"No swap partner for household {blocks[bi].household_id(hi)}")
            stats["skipped"] += 1
            continue
        distance = np.linalg.norm(positions[[pb for pb, _ in partners]] - positions[bi], axis=1)
        ranked = sorted(range(len(partners)), key=lambda i: (distance[i], blocks[partners[i][0]].block_id,
                                                              partners[i][1]))
        pool = ranked[:cfg.candidate_pool]
        pb, ph = partners[pool[int(rng.integers(len(pool)))]]
        other = households[pb][ph]
        moved = ("race_flags", "subsidized", "bedroom_class", "hud_reported")
        households[bi][hi] = record.model_copy(update={f: getattr(other, f) for f in moved})
        households[pb][ph] = other.model_copy(update={f: getattr(record, f) for f in moved})
        exchanged.update({(bi, hi), (pb, ph)})
        stats["performed"] += 1
    return households, stats


def swap_households(universe: Universe, cfg: SwapConfig, rng: np.random.Generator) -> Tuple[Universe, SwapSummary]:
    """
    Targeted random swapping, state by state.

    Households are ranked by how many households in their state share their
    full attribute tuple (ascending), then by block population (ascending).
    Selected households exchange race, subsidized status and bedroom class
    with one of the closest key-matching households in another block.

    Returns:
        The swapped universe and a summary of selected/performed/skipped swaps.
    """
    if cfg.multiplier == 0:
        n = sum(b.n_total for b in universe.blocks)
        return universe, SwapSummary(households=n, selected=0, performed=0, skipped=0)

    by_state: Dict[str, List[int]] = defaultdict(list)
    for index, block in enumerate(universe.blocks):
        by_state[block.geo_state].append(index)

    blocks = list(universe.blocks)
    totals = Counter()
    for geo_state in sorted(by_state):
        indices = by_state[geo_state]
        swapped, stats = _swap_state([blocks[i] for i in indices], cfg, rng)
        for i, households in zip(indices, swapped):
            blocks[i] = blocks[i].with_households(households)
        totals.update(stats)
        if stats["skipped"]:
            logger.info(f"State {geo_state}: {stats['skipped']} selected households had no swap partner")

    summary = SwapSummary(
        households=totals["households"],
        selected=totals["selected"],
        performed=totals["performed"],
        skipped=totals["skipped"],
    )
    logger.info(
        f"Swapping selected {summary.selected}/{summary.households} households "
        f"({summary.selected_rate:.3%}), performed {summary.performed}, skipped {summary.skipped}"
    )
    return universe.with_blocks(blocks), summary


def swap(universe: Universe, cfg: SwapConfig, rng: np.random.Generator) -> Universe:
    swapped, _ = swap_households(universe, cfg, rng)
    return swapped


# ---------------------------------------------------------------------------
# Privacy budget
# ---------------------------------------------------------------------------

HOUSEHOLD_TABLE = "household"
PERSON_TABLE = "person"

HOUSEHOLD_SIZE = "household_size"
HOUSEHOLD_RACE = "household_race"
CHILDREN = "children"


class StrategyQuery(BaseModel):
    """A noised crosstab: `cells` gives, per dimension, how many of its cells
    sum into one value of a target; `margins[target]` overrides dimensions the
    target keeps (1 cell each)."""
    model_config = ConfigDict(frozen=True)

    name: str
    fraction: float = Field(gt=0)
    table: str
    cells: Dict[str, int]
    margins: Dict[str, Dict[str, int]]

    def cells_for(self, target: str) -> int:
        kept = self.margins[target]
        return prod(kept.get(dim, n) for dim, n in self.cells.items())


STRATEGY_CATALOGUE: Tuple[StrategyQuery, ...] = (
    StrategyQuery(
        name="SEX * HISP * HHTENSHORT_3LEV * RACE * DETAILEDCOUPLETYPEMULTGENDETOWNCHILDSIZE",
        fraction=0.0002,
        table=HOUSEHOLD_TABLE,
        # couple type (5) x multigenerational (2) x child (4) cells per household size
        cells={"SEX": 2, "HISP": 2, "HHTENSHORT_3LEV": 3, "RACE": 7,
               "DETAILEDCOUPLETYPEMULTGENDETOWNCHILDSIZE": 40},
        margins={HOUSEHOLD_SIZE: {}},
    ),
    StrategyQuery(
        name="HISP * RACE",
        fraction=0.0002,
        table=HOUSEHOLD_TABLE,
        cells={"HISP": 2, "RACE": 7},
        margins={HOUSEHOLD_RACE: {"RACE": 1}},
    ),
    StrategyQuery(
        name="SEX * CHILD",
        fraction=0.0002,
        table=PERSON_TABLE,
        cells={"SEX": 2, "CHILD": 2},
        margins={CHILDREN: {"CHILD": 1}},
    ),
)


def allocate_budget(strategy_catalogue: Sequence[StrategyQuery], target_query: str) -> float:
    """Highest c_i / M_qi over the strategies that can answer `target_query` on the margin."""
    allocations = [s.fraction / s.cells_for(target_query) for s in strategy_catalogue if target_query in s.margins]
    if not allocations:
        raise BudgetAllocationError(f"query {target_query!r} is not covered by any strategy query")
    return max(allocations)


def noised_query_ids(race_groups: Sequence[str] = DEFAULT_RACE_GROUPS) -> List[str]:
    ids = [size_query_id(x) for x in SIZE_QUERY_SIZES] + [RESIDUAL_ID]
    ids += [sf1_race_id(g) for g in race_groups]
    ids.append("sf1_children")
    return ids


def query_target(query_id: str) -> str:
    if query_id == "sf1_children":
        return CHILDREN
    if query_id.startswith("sf1_race_"):
        return HOUSEHOLD_RACE
    if query_id.startswith("sf1_hh_size_"):
        return HOUSEHOLD_SIZE
    raise BudgetAllocationError(f"query {query_id!r} has no DAS budget target")


def query_table(query_id: str) -> str:
    return PERSON_TABLE if query_id == "sf1_children" else HOUSEHOLD_TABLE


def das_budget(
    rho_person: float,
    rho_household: float,
    race_groups: Sequence[str] = DEFAULT_RACE_GROUPS,
    catalogue: Sequence[StrategyQuery] = STRATEGY_CATALOGUE,
) -> PrivacyBudget:
    fractions = {qid: allocate_budget(catalogue, query_target(qid)) for qid in noised_query_ids(race_groups)}
    return PrivacyBudget(rho_person=rho_person, rho_household=rho_household, fractions=fractions)


def uniform_budget(rho_person: float, rho_household: float,
                   race_groups: Sequence[str] = DEFAULT_RACE_GROUPS) -> PrivacyBudget:
    """
    Each table's budget split evenly over the noised queries of that table.

    The household table is shared by the size and race counts; the children
    count is the only person-table query and keeps the whole person budget.
    """
    ids = noised_query_ids(race_groups)
    per_table = Counter(query_table(qid) for qid in ids)
    fractions = {qid: 1.0 / per_table[query_table(qid)] for qid in ids}
    return PrivacyBudget(rho_person=rho_person, rho_household=rho_household, fractions=fractions)


def with_hud_budget(budget: PrivacyBudget, hud_query_ids: Sequence[str]) -> PrivacyBudget:
    """Add HUD queries, splitting the household budget evenly across them."""
    fractions = dict(budget.fractions)
    fractions.update({qid: 1.0 / len(hud_query_ids) for qid in hud_query_ids})
    return budget.model_copy(update={"fractions": fractions})


def rho_for(budget: PrivacyBudget, query_id: str) -> float:
    return budget.rho_person if query_table(query_id) == PERSON_TABLE else budget.rho_household


# ---------------------------------------------------------------------------
# Noise and post-processing
# ---------------------------------------------------------------------------

def apportion(values: Sequence[int], total: int) -> List[int]:
    """Largest-remainder rescaling of non-negative integers to sum to `total`.

    Remainder ties go to the earlier position; an all-zero input is spread uniformly.
    """
    if total < 0:
        raise MechanismError(f"cannot apportion to a negative total {total}")
    if total == 0 or not values:
        return [0] * len(values)
    weights = list(values) if sum(values) > 0 else [1] * len(values)
    weight_sum = sum(weights)
    quotas = [Fraction(w * total, weight_sum) for w in weights]
    result = [q.numerator // q.denominator for q in quotas]
    remaining = total - sum(result)
    order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - result[i]), i))
    for i in order[:remaining]:
        result[i] += 1
    return result


def _size_ids() -> List[str]:
    return [size_query_id(x) for x in SIZE_QUERY_SIZES]


def post_process(noisy: BlockStatistics, invariant_occupied: int, residual: Optional[int] = None) -> BlockStatistics:
    """
    Make noisy statistics consistent with the occupied-unit invariant.

    Args:
        noisy: statistics with noised answers; negative answers (built with
            `model_construct`) are clipped here
        invariant_occupied: number of occupied units, kept exact
        residual: noised count of households of size 7+, if it was noised

    Returns:
        Statistics whose size family (1..6 plus the 7+ residual) and race
        family each sum to the invariant, with population rebuilt from the
        size distribution and children bounded by population.
    """
    if invariant_occupied < 0:
        raise MechanismError(f"block {noisy.block_id}: negative occupied-unit invariant")
    answers = {qid: max(0, int(v)) for qid, v in noisy.answers.items()}

    size_ids = _size_ids()
    if residual is None:
        residual = invariant_occupied - sum(answers.get(q, 0) for q in size_ids)
    sizes = apportion([answers.get(q, 0) for q in size_ids] + [max(0, residual)], invariant_occupied)
    for qid, value in zip(size_ids, sizes):
        if qid in answers:
            answers[qid] = value
    residual = sizes[-1]

    race_ids = [q for q in answers if q.startswith("sf1_race_")]
    if race_ids:
        for qid, value in zip(race_ids, apportion([answers[q] for q in race_ids], invariant_occupied)):
            answers[qid] = value

    population = sum(x * n for x, n in zip(SIZE_QUERY_SIZES, sizes)) + 7 * residual
    if "sf1_population" in answers:
        answers["sf1_population"] = population
    if "sf1_children" in answers:
        answers["sf1_children"] = min(answers["sf1_children"], population)

    # HUD counts cannot exceed the subsidized households they describe
    n_s = min(noisy.n_subsidized, invariant_occupied)
    if "hud_households_with_children" in answers:
        answers["hud_households_with_children"] = min(answers["hud_households_with_children"], n_s)

    return BlockStatistics(
        block_id=noisy.block_id,
        n_total=invariant_occupied,
        n_subsidized=n_s,
        answers=answers,
        senses=dict(noisy.senses),
    )


def apply_dp(stats: BlockStatistics, budget: PrivacyBudget, rng: np.random.Generator) -> BlockStatistics:
    """Noise every query the budget allocates, then post-process against the household count.

    Queries without an allocation (population, unnoised HUD counts) pass through
    to post-processing unchanged.
    """
    for qid in noised_query_ids(_race_groups_of(stats)):
        if qid not in budget.fractions:
            raise BudgetAllocationError(f"no budget allocation for query {qid!r}")

    noisy = {}
    for qid, answer in stats.answers.items():
        if qid in budget.fractions:
            noisy[qid] = discrete_gaussian(answer, budget.variance(qid, rho_for(budget, qid)), rng)
        else:
            noisy[qid] = answer
    noisy_residual = discrete_gaussian(
        residual_households(stats), budget.variance(RESIDUAL_ID, budget.rho_household), rng
    )
    raw = BlockStatistics.model_construct(
        block_id=stats.block_id, n_total=stats.n_total, n_subsidized=stats.n_subsidized,
        answers=noisy, senses=dict(stats.senses),
    )
    return post_process(raw, stats.n_total, residual=noisy_residual)


def _race_groups_of(stats: BlockStatistics) -> List[str]:
    return [qid[len("sf1_race_"):] for qid in stats.answers if qid.startswith("sf1_race_")]


def build_budget(mechanism: MechanismConfig, workload: Sequence[CountingQuery],
                 race_groups: Sequence[str] = DEFAULT_RACE_GROUPS) -> PrivacyBudget:
    if mechanism.allocation == "uniform":
        budget = uniform_budget(mechanism.rho_person, mechanism.rho_household, race_groups)
    else:
        budget = das_budget(mechanism.rho_person, mechanism.rho_household, race_groups)
    if mechanism.noise_hud:
        budget = with_hud_budget(budget, [q.id for q in workload if not is_sf1(q)])
    return budget


def _noise_block(task) -> BlockStatistics:
    index, stats, budget, seed = task
    return apply_dp(stats, budget, derive_rng(seed, STREAM_DP, index))


def publish(
    universe: Universe,
    mechanism: MechanismConfig,
    workload: List[CountingQuery],
    seed: int,
    workers: int = 1,
) -> Tuple[List[BlockStatistics], Dict[str, object]]:
    """
    Released statistics for one disclosure-avoidance condition.

    SF1-side answers come from the protected data; HUD-side answers always come
    from the original universe (and are noised only when `noise_hud` is set).

    Returns:
        Per-block statistics in universe order and a provenance dict for the file header.
    """
    provenance: Dict[str, object] = {"mechanism": mechanism.kind, "seed": seed}
    if mechanism.kind == "identity":
        return evaluate_universe(universe, workload, workers=workers), provenance

    if mechanism.kind == "swap":
        swapped, summary = swap_households(universe, mechanism.swap, derive_rng(seed, STREAM_SWAP))
        provenance.update({
            "swap_multiplier": mechanism.swap.multiplier,
            "swap_selected": summary.selected,
            "swap_performed": summary.performed,
            "swap_skipped": summary.skipped,
        })
        return evaluate_universe(swapped, workload, hud_universe=universe, workers=workers), provenance

    if mechanism.kind == "dp":
        race_groups = list(universe.empirical_reference.race_groups)
        budget = build_budget(mechanism, workload, race_groups)
        truth = evaluate_universe(universe, workload, workers=workers)
        tasks = [(i, stats, budget, seed) for i, stats in enumerate(truth)]
        provenance.update({
            "rho_person": mechanism.rho_person,
            "rho_household": mechanism.rho_household,
            "allocation": mechanism.allocation,
            "noise_hud": mechanism.noise_hud,
        })
        logger.info(f"Applying discrete Gaussian noise to {len(tasks)} blocks ({mechanism.allocation} allocation)")
        return parallel_map(_noise_block, tasks, workers), provenance

    raise MechanismError(f"unknown mechanism {mechanism.kind!r}")
