import json
import logging
from collections import Counter, defaultdict
from math import comb
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from config import GenerationConfig
from models import (
    ALPHA_EXPONENT,
    BedroomClass,
    Block,
    DEFAULT_RULE,
    EmpiricalDistribution,
    GenerationError,
    HouseholdRecord,
    PartialHousehold,
    StateTables,
    TAIL_START,
    UNIT_BEDROOMS,
    Universe,
    ViolationRule,
    race_bit,
)
from parallel import STREAM_BLOCK, STREAM_REFERENCE, derive_rng, parallel_map

logger = logging.getLogger(__name__)

UNIVERSE_SCHEMA = "houselab-universe v1"
EMPIRICAL_SCHEMA_VERSION = 1
UNIVERSE_COLUMNS = [
    "block_id", "state", "x", "y", "size", "race_flag_mask", "children", "subsidized", "bedroom_class",
    "hud_reported",
]


def _draw(rng: np.random.Generator, table: Dict) -> object:
    """Draw a key from a {value: weight} table; keys are visited in sorted order."""
    keys = sorted(table)
    weights = np.array([table[k] for k in keys], dtype=float)
    total = weights.sum()
    if total <= 0:
        raise GenerationError("cannot draw from an all-zero table")
    return keys[int(rng.choice(len(keys), p=weights / total))]


def _normalize(counter: Counter) -> Dict:
    total = sum(counter.values())
    return {k: v / total for k, v in sorted(counter.items())} if total else {}


# ---------------------------------------------------------------------------
# Empirical (PUMS-like) distribution
# ---------------------------------------------------------------------------

def _reference_household(config: GenerationConfig, rng: np.random.Generator) -> Tuple[int, int, int]:
    """One household of the reference population: (size, race_flags, children)."""
    size_class = _draw(rng, config.size_class_weights)
    group = _draw(rng, {config.race_groups.index(g): w for g, w in config.race_weights.items()})
    has_children = rng.random() < config.children_probability.get(size_class, 0.0)
    if size_class == "7+":
        decay = config.tail_decay_with_children if has_children else config.tail_decay
        sizes = range(TAIL_START, config.max_household_size + 1)
        size = _draw(rng, {s: decay ** (s - TAIL_START) for s in sizes})
    else:
        size = int(size_class)
    children = 0
    if has_children:
        children = min(size, 1 + int(rng.binomial(size - 1, config.child_share)))
    return size, race_bit(group), children


def lattice_size(config: GenerationConfig, max_race_flags: int = 1) -> int:
    """Number of SF1 cells (size, race pattern, children) the smoothing spreads over."""
    groups = len(config.race_groups)
    patterns = sum(comb(groups, k) for k in range(1, max_race_flags + 1))
    return patterns * sum(s + 1 for s in range(1, config.max_household_size + 1))


def tabulate_state(
    geo_state: str,
    households: List[Tuple[int, int, int]],
    config: GenerationConfig,
) -> StateTables:
    """Frequency tables of one state's sample of (size, race_flags, children) households."""
    configuration_counts = Counter(households)
    tail = defaultdict(Counter)
    tail_marginal = Counter()
    children = defaultdict(Counter)
    children_marginal = Counter()
    flag_counts = Counter()
    for size, flags, kids in households:
        if size >= TAIL_START:
            tail[(flags, kids > 0)][size] += 1
            tail_marginal[size] += 1
        if kids > 0:
            children[(size, flags)][kids] += 1
            children_marginal[kids] += 1
            flag_counts["has_children"] += 1
        for index, group in enumerate(config.race_groups):
            if flags & race_bit(index):
                flag_counts[f"race:{group}"] += 1

    m = len(households)
    if config.hud_binary_priors is not None:
        binary_prior = dict(config.hud_binary_priors)
    else:
        names = [f"race:{g}" for g in config.race_groups] + ["has_children"]
        binary_prior = {name: (flag_counts[name] + 0.5) / (m + 1.0) for name in names}

    return StateTables(
        geo_state=geo_state,
        sample_size=m,
        lattice_size=lattice_size(config),
        configuration_counts=dict(configuration_counts),
        tail_size={key: _normalize(c) for key, c in tail.items()},
        tail_size_marginal=_normalize(tail_marginal),
        children={key: _normalize(c) for key, c in children.items()},
        children_marginal=_normalize(children_marginal),
        bedroom_prior={BedroomClass[name]: p for name, p in config.bedroom_prior.items()},
        binary_prior=binary_prior,
    )


def build_empirical_distribution(config: GenerationConfig, seed: int) -> EmpiricalDistribution:
    """Draw a reference population per state and tabulate a `sample_fraction` sample of it."""
    states = {}
    for index, geo_state in enumerate(config.states):
        rng = derive_rng(seed, STREAM_REFERENCE, index)
        population = [_reference_household(config, rng) for _ in range(config.reference_households_per_state)]
        n_sample = max(1, int(round(config.sample_fraction * len(population))))
        chosen = np.sort(rng.choice(len(population), size=n_sample, replace=False))
        sample = [population[i] for i in chosen]
        states[geo_state] = tabulate_state(geo_state, sample, config)
        logger.info(f"Empirical tables for state {geo_state}: {n_sample} sampled of {len(population)} households")
    return EmpiricalDistribution(race_groups=tuple(config.race_groups), states=states)


# ---------------------------------------------------------------------------
# Samplers
# ---------------------------------------------------------------------------

def sample_tail_size(
    record: PartialHousehold,
    dist: EmpiricalDistribution,
    rng: np.random.Generator,
    events: Optional[List[str]] = None,
) -> int:
    """Exact size (>= 7) of a household in the open top size class."""
    if record.size_class != "7+":
        raise GenerationError(f"tail size requested for size class {record.size_class}")
    tables = dist.for_state(record.geo_state)
    table = tables.tail_size.get((record.race_flags, record.has_children))
    if not table:
        if not tables.tail_size_marginal:
            raise GenerationError(f"state {record.geo_state} has no tail-size observations")
        message = (
            f"tail-size fallback: no cell for race=0x{record.race_flags:x} "
            f"has_children={record.has_children} in state {record.geo_state}"
        )
        logger.debug(message)
        if events is not None:
            events.append(message)
        table = tables.tail_size_marginal
    return int(_draw(rng, table))


def sample_children(
    record: PartialHousehold,
    dist: EmpiricalDistribution,
    rng: np.random.Generator,
    events: Optional[List[str]] = None,
) -> int:
    """Number of children (1..size) for a household flagged as having children."""
    if not record.has_children:
        raise GenerationError("children sampled for a household without children")
    if record.size is None:
        raise GenerationError("children sampled before the household size is known")
    tables = dist.for_state(record.geo_state)
    table = tables.children.get((record.size, record.race_flags))
    if not table:
        if not tables.children_marginal:
            raise GenerationError(f"state {record.geo_state} has no children observations")
        message = (
            f"children fallback: no cell for size={record.size} race=0x{record.race_flags:x} "
            f"in state {record.geo_state}"
        )
        logger.debug(message)
        if events is not None:
            events.append(message)
        table = tables.children_marginal
    children = int(_draw(rng, table))
    if children > record.size:
        logger.warning(f"Clamping drawn children {children} to household size {record.size}")
        if events is not None:
            events.append(f"children clamp: {children} -> {record.size}")
        children = record.size
    return children


def subsidy_weights(block: Block, tables: StateTables, race_groups) -> np.ndarray:
    """Heuristic likelihood of each household living in a subsidized property."""
    weights = []
    for h in block.households:
        numerator = 1.0
        for index, group in enumerate(race_groups):
            p = tables.binary_prior[f"race:{group}"]
            numerator *= p if h.race_flags & race_bit(index) else 1.0 - p
        p = tables.binary_prior["has_children"]
        numerator *= p if h.has_children else 1.0 - p
        weights.append(numerator / tables.p_smoothed((h.size, h.race_flags, h.children)))
    return np.array(weights, dtype=float)


def assign_subsidized(
    block: Block,
    n_s: int,
    priors: EmpiricalDistribution,
    rng: np.random.Generator,
) -> Block:
    """Mark exactly n_s households subsidized, drawn without replacement by heuristic likelihood.

    Newly subsidized households carry a provisional GE3 unit until assign_bedrooms runs.
    """
    n = block.n_total
    if not 0 <= n_s <= n:
        raise GenerationError(f"block {block.block_id}: cannot subsidize {n_s} of {n} households")
    if n_s == 0:
        chosen = set()
    elif n_s == n:
        chosen = set(range(n))
    else:
        weights = subsidy_weights(block, priors.for_state(block.geo_state), priors.race_groups)
        chosen = set(int(i) for i in rng.choice(n, size=n_s, replace=False, p=weights / weights.sum()))

    households = []
    for index, h in enumerate(block.households):
        if index in chosen:
            households.append(h.model_copy(update={"subsidized": True, "bedroom_class": BedroomClass.GE3}))
        else:
            households.append(h.model_copy(update={"subsidized": False, "bedroom_class": BedroomClass.NONE}))
    return block.with_households(households)


def bedroom_weights(size: int, prior: Dict[BedroomClass, float], alpha: float,
                    rule: ViolationRule = DEFAULT_RULE, exponent: float = ALPHA_EXPONENT) -> np.ndarray:
    """p_b * (alpha ** exponent)^violation(b, size), renormalized over the unit classes."""
    tilt = alpha ** exponent
    weights = np.array([
        prior[b] * (tilt if rule.is_violation(size, True, int(b)) else 1.0) for b in UNIT_BEDROOMS
    ])
    return weights / weights.sum()


def assign_bedrooms(
    block: Block,
    priors: EmpiricalDistribution,
    alpha: float,
    rng: np.random.Generator,
    rule: ViolationRule = DEFAULT_RULE,
    exponent: float = ALPHA_EXPONENT,
) -> Block:
    prior = priors.for_state(block.geo_state).bedroom_prior
    households = []
    for h in block.households:
        if h.subsidized:
            p = bedroom_weights(h.size, prior, alpha, rule, exponent)
            bedroom = UNIT_BEDROOMS[int(rng.choice(len(UNIT_BEDROOMS), p=p))]
            h = h.model_copy(update={"bedroom_class": bedroom})
        households.append(h)
    return block.with_households(households)


# ---------------------------------------------------------------------------
# Universe
# ---------------------------------------------------------------------------

def _state_of(index: int, config: GenerationConfig) -> str:
    return config.states[index * len(config.states) // config.n_blocks]


def _generate_block(task) -> Tuple[Block, List[str]]:
    index, config, dist, seed = task
    rng = derive_rng(seed, STREAM_BLOCK, index)
    geo_state = _state_of(index, config)
    events: List[str] = []

    n_total = int(_draw(rng, config.household_count_weights))
    n_s = config.subsidized_count(n_total)
    if n_s > n_total:
        raise GenerationError(f"block {index}: n_s={n_s} exceeds N={n_total}")
    position = (float(rng.random()), float(rng.random()))

    households = []
    for _ in range(n_total):
        size_class = _draw(rng, config.size_class_weights)
        group = _draw(rng, {config.race_groups.index(g): w for g, w in config.race_weights.items()})
        has_children = bool(rng.random() < config.children_probability.get(size_class, 0.0))
        partial = PartialHousehold(
            geo_state=geo_state, size_class=size_class, race_flags=race_bit(group), has_children=has_children,
        )
        if size_class == "7+":
            size = min(sample_tail_size(partial, dist, rng, events), config.max_household_size)
        else:
            size = int(size_class)
        partial = partial.model_copy(update={"size": size})
        children = sample_children(partial, dist, rng, events) if has_children else 0
        households.append(HouseholdRecord(size=size, race_flags=partial.race_flags, children=children))

    block = Block(
        block_id=f"{geo_state}-{index:06d}", geo_state=geo_state, position=position, households=tuple(households),
    )
    block = assign_subsidized(block, n_s, dist, rng)
    block = assign_bedrooms(block, dist, config.alpha, rng, exponent=config.alpha_exponent)

    if config.response_rate < 1.0:
        kept = []
        dropped = 0
        for h in block.households:
            if h.subsidized and rng.random() >= config.response_rate:
                h = h.model_copy(update={"hud_reported": False})
                dropped += 1
            kept.append(h)
        if dropped:
            events.append(f"{block.block_id}: {dropped} subsidized households did not respond")
        block = block.with_households(kept)
    return block, [f"{block.block_id}: {e}" for e in events]


def generate_universe(
    config: GenerationConfig,
    dist: EmpiricalDistribution,
    seed: int,
    workers: int = 1,
) -> Universe:
    """Ground-truth universe; each block draws from its own (seed, block index) stream."""
    missing = set(config.states) - set(dist.states)
    if missing:
        raise GenerationError(f"empirical distribution lacks states {sorted(missing)}")
    logger.info(f"Generating {config.n_blocks} blocks (seed {seed}, alpha {config.alpha})")
    results = parallel_map(_generate_block, [(i, config, dist, seed) for i in range(config.n_blocks)], workers)
    blocks = [block for block, _ in results]
    log = [event for _, events in results for event in events]
    if log:
        logger.info(f"Generation recorded {len(log)} fallback events")
    return Universe(blocks=tuple(blocks), seed=seed, alpha=config.alpha, empirical_reference=dist,
                    generation_log=tuple(log))


def violation_rate(universe: Universe, rule: ViolationRule = DEFAULT_RULE) -> float:
    subsidized = [h for b in universe.blocks for h in b.households if h.subsidized]
    if not subsidized:
        return 0.0
    return sum(1 for h in subsidized if rule.violates(h)) / len(subsidized)


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------

def write_universe(universe: Universe, path: Path) -> None:
    rows = []
    for block in universe.blocks:
        for h in block.households:
            rows.append({
                "block_id": block.block_id,
                "state": block.geo_state,
                "x": block.position[0],
                "y": block.position[1],
                "size": h.size,
                "race_flag_mask": f"{h.race_flags:x}",
                "children": h.children,
                "subsidized": int(h.subsidized),
                "bedroom_class": int(h.bedroom_class),
                "hud_reported": int(h.hud_reported),
            })
    path = Path(path)
    with path.open("w", newline="") as handle:
        handle.write(f"# {UNIVERSE_SCHEMA} seed={universe.seed} alpha={universe.alpha!r}\n")
        pd.DataFrame(rows, columns=UNIVERSE_COLUMNS).to_csv(handle, sep="\t", index=False, float_format="%.17g")


def read_universe(path: Path, dist: EmpiricalDistribution) -> Universe:
    path = Path(path)
    with path.open() as handle:
        header = handle.readline().strip()
    if not header.startswith(f"# {UNIVERSE_SCHEMA}"):
        raise GenerationError(f"{path}: not a universe file (header {header!r})")
    fields = dict(part.split("=", 1) for part in header.split()[3:])
    frame = pd.read_csv(path, sep="\t", skiprows=1, dtype={"block_id": str, "state": str, "race_flag_mask": str})
    if "hud_reported" not in frame.columns:
        frame["hud_reported"] = 1

    blocks = []
    for block_id, rows in frame.groupby("block_id", sort=False):
        first = rows.iloc[0]
        households = tuple(
            HouseholdRecord(
                size=int(r.size),
                race_flags=int(r.race_flag_mask, 16),
                children=int(r.children),
                subsidized=bool(r.subsidized),
                bedroom_class=BedroomClass(int(r.bedroom_class)),
                hud_reported=bool(r.hud_reported),
            )
            for r in rows.itertuples(index=False)
        )
        blocks.append(Block(block_id=block_id, geo_state=str(first.state),
                            position=(float(first.x), float(first.y)), households=households))
    return Universe(blocks=tuple(blocks), seed=int(fields["seed"]), alpha=float(fields["alpha"]),
                    empirical_reference=dist)


def write_empirical_distribution(dist: EmpiricalDistribution, path: Path) -> None:
    states = {}
    for geo_state, t in dist.states.items():
        states[geo_state] = {
            "sample_size": t.sample_size,
            "lattice_size": t.lattice_size,
            "smoothing": t.smoothing,
            "configuration_counts": [[s, r, c, n] for (s, r, c), n in sorted(t.configuration_counts.items())],
            "tail_size": [[r, h, s, p] for (r, h), table in sorted(t.tail_size.items()) for s, p in table.items()],
            "tail_size_marginal": [[s, p] for s, p in t.tail_size_marginal.items()],
            "children": [[s, r, c, p] for (s, r), table in sorted(t.children.items()) for c, p in table.items()],
            "children_marginal": [[c, p] for c, p in t.children_marginal.items()],
            "bedroom_prior": {b.name: p for b, p in t.bedroom_prior.items()},
            "binary_prior": t.binary_prior,
        }
    payload = {"schema_version": EMPIRICAL_SCHEMA_VERSION, "race_groups": list(dist.race_groups), "states": states}
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def read_empirical_distribution(path: Path) -> EmpiricalDistribution:
    """Load frequency tables written by write_empirical_distribution or supplied externally."""
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, ValueError) as e:
        raise GenerationError(f"cannot read empirical distribution {path}: {e}") from e
    if payload.get("schema_version") != EMPIRICAL_SCHEMA_VERSION:
        raise GenerationError(f"{path}: unsupported schema_version {payload.get('schema_version')}")

    states = {}
    for geo_state, t in payload["states"].items():
        tail = defaultdict(dict)
        for r, h, s, p in t.get("tail_size", []):
            tail[(int(r), bool(h))][int(s)] = float(p)
        children = defaultdict(dict)
        for s, r, c, p in t.get("children", []):
            children[(int(s), int(r))][int(c)] = float(p)
        states[geo_state] = StateTables(
            geo_state=geo_state,
            sample_size=int(t["sample_size"]),
            lattice_size=int(t["lattice_size"]),
            smoothing=float(t.get("smoothing", 0.5)),
            configuration_counts={(int(s), int(r), int(c)): int(n) for s, r, c, n in t["configuration_counts"]},
            tail_size=dict(tail),
            tail_size_marginal={int(s): float(p) for s, p in t.get("tail_size_marginal", [])},
            children=dict(children),
            children_marginal={int(c): float(p) for c, p in t.get("children_marginal", [])},
            bedroom_prior={BedroomClass[name]: float(p) for name, p in t["bedroom_prior"].items()},
            binary_prior={k: float(v) for k, v in t["binary_prior"].items()},
        )
    return EmpiricalDistribution(race_groups=tuple(payload["race_groups"]), states=states)


def block_state(block_id: str) -> str:
    """State part of a generated block id ("{state}-{index:06d}")."""
    state, sep, _ = block_id.rpartition("-")
    if not sep:
        raise GenerationError(f"block id {block_id!r} carries no state prefix")
    return state
