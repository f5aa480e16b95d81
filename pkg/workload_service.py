import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import pandas as pd

from models import (
    BedroomClass,
    Block,
    BlockStatistics,
    CountingQuery,
    DEFAULT_RACE_GROUPS,
    HISPANIC_GROUP,
    Scope,
    Sense,
    Universe,
    Weight,
    WorkloadError,
    race_bit,
)
from parallel import parallel_map

logger = logging.getLogger(__name__)

N_TOTAL_ROW = "__n_total__"
N_SUBSIDIZED_ROW = "__n_subsidized__"
STATISTICS_COLUMNS = ["block_id", "query_id", "answer", "sense"]

SIZE_QUERY_SIZES = range(1, 7)
RESIDUAL_ID = "sf1_hh_size_7plus"


def size_query_id(size: int) -> str:
    return f"sf1_hh_size_{size}"


def sf1_race_id(group: str) -> str:
    return f"sf1_race_{group}"


def hud_race_id(group: str) -> str:
    if group == HISPANIC_GROUP:
        return "hud_hispanic_householder"
    return f"hud_householder_{group}"


BEDROOM_QUERY_IDS = {
    BedroomClass.LE1: "hud_bedrooms_le1",
    BedroomClass.EQ2: "hud_bedrooms_eq2",
    BedroomClass.GE3: "hud_bedrooms_ge3",
}


def standard_workload(j_groups: Sequence[str] = DEFAULT_RACE_GROUPS, hud_complete: bool = True) -> List[CountingQuery]:
    """
    The SF1 and HUD query catalogue with comparison senses.

    Args:
        j_groups: race/ethnicity groups; bit i of race_flags is group i
        hud_complete: every subsidized household answers the HUD report; when
            False the HUD children count only bounds the truth from below

    Returns:
        SF1 queries first (sizes 1..6, population, race groups, children),
        then the HUD queries over the subsidized scope.
    """
    if not j_groups:
        raise WorkloadError("at least one race group is required")
    if len(set(j_groups)) != len(j_groups):
        raise WorkloadError(f"duplicate race groups in {list(j_groups)}")

    queries = [
        CountingQuery(id=size_query_id(x), scope=Scope.ALL, sense=Sense.EQ, size=x) for x in SIZE_QUERY_SIZES
    ]
    queries.append(CountingQuery(id="sf1_population", scope=Scope.ALL, sense=Sense.GE, weight=Weight.SIZE))
    queries.extend(
        CountingQuery(id=sf1_race_id(g), scope=Scope.ALL, sense=Sense.GE, race_bit=race_bit(i))
        for i, g in enumerate(j_groups)
    )
    queries.append(CountingQuery(id="sf1_children", scope=Scope.ALL, sense=Sense.GE, weight=Weight.CHILDREN))

    queries.append(CountingQuery(id="hud_population", scope=Scope.SUBSIDIZED, sense=Sense.GE, weight=Weight.SIZE))
    # non-Hispanic groups first, then the Hispanic cross
    ordered = [(i, g) for i, g in enumerate(j_groups) if g != HISPANIC_GROUP]
    ordered += [(i, g) for i, g in enumerate(j_groups) if g == HISPANIC_GROUP]
    queries.extend(
        CountingQuery(id=hud_race_id(g), scope=Scope.SUBSIDIZED, sense=Sense.GE, race_bit=race_bit(i))
        for i, g in ordered
    )
    # 1-adult plus 2-adult households with children
    queries.append(
        CountingQuery(id="hud_households_with_children", scope=Scope.SUBSIDIZED,
                      sense=Sense.EQ if hud_complete else Sense.GE,
                      requires_children=True)
    )
    queries.extend(
        CountingQuery(id=qid, scope=Scope.SUBSIDIZED, sense=Sense.GE, bedroom=b) for b, qid in BEDROOM_QUERY_IDS.items()
    )
    return queries


def is_sf1(query: CountingQuery) -> bool:
    return query.id.startswith("sf1_")


def _answer(households, query: CountingQuery) -> int:
    return sum(query.contribution(h.configuration) for h in households)


def evaluate(block: Block, workload: List[CountingQuery]) -> BlockStatistics:
    """Exact answers of every query on one block."""
    return evaluate_split(block, block, workload)


def evaluate_split(sf1_block: Block, hud_block: Block, workload: List[CountingQuery]) -> BlockStatistics:
    """SF1 answers from one version of a block and HUD answers from another (e.g. unswapped)."""
    if sf1_block.block_id != hud_block.block_id:
        raise WorkloadError(f"cannot combine blocks {sf1_block.block_id} and {hud_block.block_id}")
    if sf1_block.n_total != hud_block.n_total:
        raise WorkloadError(f"block {sf1_block.block_id}: household counts differ between sources")
    # non-respondents are missing from the HUD answers but still counted in n_subsidized
    reported = [h for h in hud_block.households if h.hud_reported]
    answers = {}
    senses = {}
    for query in workload:
        if is_sf1(query):
            answers[query.id] = _answer(sf1_block.households, query)
        else:
            answers[query.id] = _answer(reported, query)
        senses[query.id] = query.sense
    return BlockStatistics(
        block_id=sf1_block.block_id,
        n_total=sf1_block.n_total,
        n_subsidized=hud_block.n_subsidized,
        answers=answers,
        senses=senses,
    )


def residual_households(stats: BlockStatistics) -> int:
    """Households not covered by the size-1..6 counts, clamped at 0."""
    covered = sum(stats.answers.get(size_query_id(x), 0) for x in SIZE_QUERY_SIZES)
    return max(0, stats.n_total - covered)


def _evaluate_pair(task) -> BlockStatistics:
    sf1_block, hud_block, workload = task
    return evaluate_split(sf1_block, hud_block, workload)


def evaluate_universe(
    universe: Universe,
    workload: List[CountingQuery],
    hud_universe: Optional[Universe] = None,
    workers: int = 1,
) -> List[BlockStatistics]:
    hud_universe = hud_universe or universe
    if len(universe.blocks) != len(hud_universe.blocks):
        raise WorkloadError("SF1 and HUD universes have different block counts")
    tasks = [(a, b, workload) for a, b in zip(universe.blocks, hud_universe.blocks)]
    return parallel_map(_evaluate_pair, tasks, workers)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_statistics(
    statistics: Iterable[BlockStatistics],
    path: Path,
    provenance: Optional[Dict[str, object]] = None,
) -> None:
    """One row per (block_id, query_id, answer, sense); provenance goes in '#' header lines."""
    rows = []
    for stats in statistics:
        rows.append((stats.block_id, N_TOTAL_ROW, stats.n_total, Sense.EQ.value))
        rows.append((stats.block_id, N_SUBSIDIZED_ROW, stats.n_subsidized, Sense.EQ.value))
        for query_id, answer in stats.answers.items():
            rows.append((stats.block_id, query_id, int(answer), stats.senses[query_id].value))
    path = Path(path)
    with path.open("w", newline="") as handle:
        for key, value in sorted((provenance or {}).items()):
            handle.write(f"# {key}={value}\n")
        pd.DataFrame(rows, columns=STATISTICS_COLUMNS).to_csv(handle, sep="\t", index=False)


def read_statistics(path: Path) -> Tuple[List[BlockStatistics], Dict[str, str]]:
    path = Path(path)
    provenance = {}
    skip = 0
    with path.open() as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            provenance[key] = value
            skip += 1
    try:
        frame = pd.read_csv(path, sep="\t", skiprows=skip, dtype={"block_id": str, "query_id": str, "sense": str})
    except (OSError, ValueError) as e:
        raise WorkloadError(f"cannot read statistics {path}: {e}") from e
    missing = set(STATISTICS_COLUMNS) - set(frame.columns)
    if missing:
        raise WorkloadError(f"{path}: missing columns {sorted(missing)}")

    statistics = []
    for block_id, rows in frame.groupby("block_id", sort=False):
        answers, senses = {}, {}
        n_total = n_subsidized = None
        for row in rows.itertuples(index=False):
            if row.query_id == N_TOTAL_ROW:
                n_total = int(row.answer)
            elif row.query_id == N_SUBSIDIZED_ROW:
                n_subsidized = int(row.answer)
            else:
                answers[row.query_id] = int(row.answer)
                senses[row.query_id] = Sense(row.sense)
        if n_total is None or n_subsidized is None:
            raise WorkloadError(f"{path}: block {block_id} lacks household counts")
        statistics.append(BlockStatistics(
            block_id=block_id, n_total=n_total, n_subsidized=n_subsidized, answers=answers, senses=senses,
        ))
    logger.debug(f"Read statistics for {len(statistics)} blocks from {path}")
    return statistics, provenance
