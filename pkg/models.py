import enum
from typing import Dict, List, NamedTuple, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sqlalchemy import Column, DateTime, Float, ForeignKey, Integer, String, Text, UniqueConstraint
from sqlalchemy.sql import func

from database import Base


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------

class HouseLabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigError(HouseLabError):
    pass


class GenerationError(HouseLabError):
    pass


class WorkloadError(HouseLabError):
    pass


class MechanismError(HouseLabError):
    pass


class BudgetAllocationError(MechanismError):
    pass


class SolverError(HouseLabError):
    pass


class AttackError(HouseLabError):
    pass


class EvaluationError(HouseLabError):
    pass


class PlotError(HouseLabError):
    pass


class StageError(HouseLabError):
    """A pipeline stage failed; `stage` names it and `cause` keeps the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


# ---------------------------------------------------------------------------
# Household attributes
# ---------------------------------------------------------------------------

DEFAULT_RACE_GROUPS: Tuple[str, ...] = (
    "white_nh",
    "black_nh",
    "aian_nh",
    "asian_nh",
    "nhpi_nh",
    "other_nh",
    "hispanic",
)
HISPANIC_GROUP = "hispanic"
SIZE_CLASSES: Tuple[str, ...] = ("1", "2", "3", "4", "5", "6", "7+")
TAIL_START = 7


class BedroomClass(enum.IntEnum):
    LE1 = 0
    EQ2 = 1
    GE3 = 2
    NONE = 3


UNIT_BEDROOMS: Tuple[BedroomClass, ...] = (BedroomClass.LE1, BedroomClass.EQ2, BedroomClass.GE3)


class Configuration(NamedTuple):
    """Hashable household configuration; the unit of the histogram formulation."""
    size: int
    race_flags: int
    children: int
    subsidized: bool
    bedroom: int

    @property
    def adults(self) -> int:
        return self.size - self.children

    @property
    def sf1_key(self) -> Tuple[int, int, int]:
        return (self.size, self.race_flags, self.children)


def race_bit(index: int) -> int:
    return 1 << index


class HouseholdRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    size: int = Field(ge=1)
    race_flags: int = Field(ge=1)
    children: int = Field(ge=0)
    subsidized: bool = False
    bedroom_class: BedroomClass = BedroomClass.NONE
    # False for a subsidized household missing from the HUD report
    hud_reported: bool = True

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.children > self.size:
            raise ValueError(f"children ({self.children}) exceed size ({self.size})")
        if (self.bedroom_class == BedroomClass.NONE) == self.subsidized:
            raise ValueError("bedroom_class must be NONE exactly when the household is not subsidized")
        if not self.hud_reported and not self.subsidized:
            raise ValueError("only subsidized households can be missing from the HUD report")
        return self

    @property
    def adults(self) -> int:
        return self.size - self.children

    @property
    def has_children(self) -> bool:
        return self.children > 0

    @property
    def configuration(self) -> Configuration:
        return Configuration(self.size, self.race_flags, self.children, self.subsidized, int(self.bedroom_class))

    @classmethod
    def from_configuration(cls, config: Configuration) -> "HouseholdRecord":
        return cls(
            size=config.size,
            race_flags=config.race_flags,
            children=config.children,
            subsidized=config.subsidized,
            bedroom_class=BedroomClass(config.bedroom),
        )


class PartialHousehold(BaseModel):
    """A household half-way through generation: size class known, exact values pending."""
    model_config = ConfigDict(frozen=True)

    geo_state: str
    size_class: str
    race_flags: int = Field(ge=1)
    has_children: bool
    size: Optional[int] = None

    @field_validator("size_class")
    @classmethod
    def _known_class(cls, value: str) -> str:
        if value not in SIZE_CLASSES:
            raise ValueError(f"unknown size class {value!r}")
        return value


class ViolationRule(BaseModel):
    """Two heartbeats per room: occupancy limit per bedroom class (None = unlimited)."""
    model_config = ConfigDict(frozen=True)

    max_occupancy: Dict[BedroomClass, Optional[int]] = Field(
        default_factory=lambda: {BedroomClass.LE1: 2, BedroomClass.EQ2: 4, BedroomClass.GE3: None}
    )

    def limit(self, bedroom: int) -> Optional[int]:
        return self.max_occupancy.get(BedroomClass(bedroom))

    def is_violation(self, size: int, subsidized: bool, bedroom: int) -> bool:
        if not subsidized or bedroom == BedroomClass.NONE:
            return False
        limit = self.limit(bedroom)
        return limit is not None and size > limit

    def violates(self, record: HouseholdRecord) -> bool:
        return self.is_violation(record.size, record.subsidized, int(record.bedroom_class))

    def violates_configuration(self, config: Configuration) -> bool:
        return self.is_violation(config.size, config.subsidized, config.bedroom)


DEFAULT_RULE = ViolationRule()

# violating bedroom classes are weighted by alpha ** ALPHA_EXPONENT
ALPHA_EXPONENT = 0.3


class Block(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    geo_state: str
    position: Tuple[float, float]
    households: Tuple[HouseholdRecord, ...]

    @property
    def n_total(self) -> int:
        return len(self.households)

    @property
    def n_subsidized(self) -> int:
        return sum(1 for h in self.households if h.subsidized)

    def with_households(self, households) -> "Block":
        return self.model_copy(update={"households": tuple(households)})

    def household_id(self, index: int) -> str:
        return f"{self.block_id}:{index}"


# ---------------------------------------------------------------------------
# Empirical distribution (PUMS-like sample tables)
# ---------------------------------------------------------------------------

FREQ_TOLERANCE = 1e-9


def _check_table(name: str, table: Dict) -> None:
    if not table:
        return
    total = sum(table.values())
    if abs(total - 1.0) > FREQ_TOLERANCE:
        raise ValueError(f"frequency table {name} sums to {total}, not 1")


class StateTables(BaseModel):
    """Frequency tables for one state."""
    model_config = ConfigDict(frozen=True)

    geo_state: str
    sample_size: int = Field(ge=0)
    lattice_size: int = Field(ge=1)
    smoothing: float = 0.5
    # (size, race_flags, children) -> household count in the sample
    configuration_counts: Dict[Tuple[int, int, int], int] = Field(default_factory=dict)
    # (race_flags, has_children) -> {size >= 7: p}
    tail_size: Dict[Tuple[int, bool], Dict[int, float]] = Field(default_factory=dict)
    tail_size_marginal: Dict[int, float] = Field(default_factory=dict)
    # (size, race_flags) -> {children >= 1: p}
    children: Dict[Tuple[int, int], Dict[int, float]] = Field(default_factory=dict)
    children_marginal: Dict[int, float] = Field(default_factory=dict)
    bedroom_prior: Dict[BedroomClass, float] = Field(default_factory=dict)
    # "race:<group>" / "has_children" -> p in (0, 1)
    binary_prior: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_frequencies(self):
        if self.configuration_counts and sum(self.configuration_counts.values()) != self.sample_size:
            raise ValueError("configuration counts do not add up to the sample size")
        for key, table in self.tail_size.items():
            _check_table(f"tail_size{key}", table)
        for key, table in self.children.items():
            _check_table(f"children{key}", table)
        _check_table("tail_size_marginal", self.tail_size_marginal)
        _check_table("children_marginal", self.children_marginal)
        _check_table("bedroom_prior", self.bedroom_prior)
        for name, p in self.binary_prior.items():
            if not 0.0 < p < 1.0:
                raise ValueError(f"binary prior {name}={p} outside (0, 1)")
        return self

    def p_census(self, key: Tuple[int, int, int]) -> float:
        """Raw sample proportion of an SF1 configuration (0 when unseen)."""
        if self.sample_size == 0:
            return 0.0
        return self.configuration_counts.get(key, 0) / self.sample_size

    def p_smoothed(self, key: Tuple[int, int, int]) -> float:
        count = self.configuration_counts.get(key, 0)
        return (count + self.smoothing) / (self.sample_size + self.smoothing * self.lattice_size)

    def support(self) -> List[Tuple[int, int, int]]:
        return sorted(k for k, v in self.configuration_counts.items() if v > 0)


class EmpiricalDistribution(BaseModel):
    model_config = ConfigDict(frozen=True)

    race_groups: Tuple[str, ...] = DEFAULT_RACE_GROUPS
    states: Dict[str, StateTables]

    def for_state(self, geo_state: str) -> StateTables:
        try:
            return self.states[geo_state]
        except KeyError:
            raise GenerationError(f"no empirical tables for state {geo_state!r}") from None


class Universe(BaseModel):
    model_config = ConfigDict(frozen=True)

    blocks: Tuple[Block, ...]
    seed: int
    alpha: float
    empirical_reference: EmpiricalDistribution
    generation_log: Tuple[str, ...] = ()

    def block(self, block_id: str) -> Block:
        for block in self.blocks:
            if block.block_id == block_id:
                return block
        raise KeyError(block_id)

    def with_blocks(self, blocks) -> "Universe":
        return self.model_copy(update={"blocks": tuple(blocks)})


# ---------------------------------------------------------------------------
# Workload
# ---------------------------------------------------------------------------

class Scope(str, enum.Enum):
    ALL = "ALL"
    SUBSIDIZED = "SUBSIDIZED"


class Sense(str, enum.Enum):
    EQ = "EQ"
    GE = "GE"


class Weight(str, enum.Enum):
    COUNT = "COUNT"
    SIZE = "SIZE"
    CHILDREN = "CHILDREN"


class CountingQuery(BaseModel):
    """A household counting query; the predicate is declarative so it pickles across workers."""
    model_config = ConfigDict(frozen=True)

    id: str
    scope: Scope
    sense: Sense
    weight: Weight = Weight.COUNT
    size: Optional[int] = None
    race_bit: Optional[int] = None
    bedroom: Optional[BedroomClass] = None
    requires_children: bool = False

    def matches(self, config: Configuration) -> bool:
        if self.scope == Scope.SUBSIDIZED and not config.subsidized:
            return False
        if self.size is not None and config.size != self.size:
            return False
        if self.race_bit is not None and not config.race_flags & self.race_bit:
            return False
        if self.bedroom is not None and config.bedroom != self.bedroom:
            return False
        if self.requires_children and config.children == 0:
            return False
        return True

    def contribution(self, config: Configuration) -> int:
        if not self.matches(config):
            return 0
        if self.weight == Weight.SIZE:
            return config.size
        if self.weight == Weight.CHILDREN:
            return config.children
        return 1


class BlockStatistics(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    n_total: int = Field(ge=0)
    n_subsidized: int = Field(ge=0)
    answers: Dict[str, int]
    senses: Dict[str, Sense]

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.n_subsidized > self.n_total:
            raise ValueError(f"block {self.block_id}: n_subsidized exceeds n_total")
        negative = [q for q, v in self.answers.items() if v < 0]
        if negative:
            raise ValueError(f"block {self.block_id}: negative answers for {negative}")
        if set(self.answers) != set(self.senses):
            raise ValueError(f"block {self.block_id}: answers and senses disagree on query ids")
        return self

    def with_answers(self, answers: Dict[str, int], **updates) -> "BlockStatistics":
        return self.model_copy(update={"answers": dict(answers), **updates})


# ---------------------------------------------------------------------------
# Mechanisms
# ---------------------------------------------------------------------------

class SwapConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    tiers: Tuple[Tuple[float, float], ...] = ((0.005, 1.0), (0.20, 0.6), (0.50, 0.3), (1.0, 0.1))
    multiplier: float = Field(default=0.38, ge=0.0)
    candidate_pool: int = Field(default=5, ge=1)
    swap_key: str = "size_adults"

    @field_validator("tiers")
    @classmethod
    def _check_tiers(cls, tiers):
        previous = 0.0
        for fraction, probability in tiers:
            if fraction <= previous:
                raise ValueError("tier fractions must be strictly increasing")
            if not 0.0 <= probability <= 1.0:
                raise ValueError(f"tier probability {probability} outside [0, 1]")
            previous = fraction
        if abs(previous - 1.0) > 1e-12:
            raise ValueError("tier fractions must end at 1.0")
        return tiers

    @field_validator("swap_key")
    @classmethod
    def _check_key(cls, key):
        if key not in ("size_adults", "size_children"):
            raise ValueError(f"unknown swap key {key!r}")
        return key


class PrivacyBudget(BaseModel):
    model_config = ConfigDict(frozen=True)

    rho_person: float = Field(default=4.96, gt=0)
    rho_household: float = Field(default=7.70, gt=0)
    fractions: Dict[str, float] = Field(default_factory=dict)

    @field_validator("fractions")
    @classmethod
    def _positive(cls, fractions):
        for query_id, c in fractions.items():
            if not c > 0:
                raise ValueError(f"budget fraction for {query_id} must be positive")
        return fractions

    def variance(self, query_id: str, rho: float) -> float:
        if query_id not in self.fractions:
            raise BudgetAllocationError(f"no budget allocation for query {query_id!r}")
        return 1.0 / (self.fractions[query_id] * rho)


# ---------------------------------------------------------------------------
# Attack
# ---------------------------------------------------------------------------

class SolveStatus(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    FEASIBLE = "FEASIBLE"
    INFEASIBLE = "INFEASIBLE"
    BOUND_REACHED = "BOUND_REACHED"


class HouseholdSubset(str, enum.Enum):
    ALL = "ALL"
    SUBSIDIZED = "SUBSIDIZED"
    VIOLATING = "VIOLATING"


class BlockOutcome(str, enum.Enum):
    FLAGGED = "FLAGGED"
    CLEAR = "CLEAR"
    INCONSISTENT = "INCONSISTENT"
    UNDETERMINED = "UNDETERMINED"


ATTRIBUTE_GETTERS = {
    "size": lambda c: c.size,
    "race": lambda c: c.race_flags,
    "children": lambda c: c.children,
    "has_children": lambda c: c.children > 0,
    "subsidized": lambda c: c.subsidized,
    "bedroom": lambda c: c.bedroom,
    "white_nh": lambda c: bool(c.race_flags & race_bit(0)),
}

ATTRIBUTE_PRESETS: Dict[str, Tuple[str, ...]] = {
    "full": ("size", "race", "children", "subsidized", "bedroom"),
    "simple": ("size", "bedroom", "white_nh", "has_children"),
}


def project(config: Configuration, attributes: Tuple[str, ...]) -> tuple:
    return tuple(ATTRIBUTE_GETTERS[name](config) for name in attributes)


class Reconstruction(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    counts: Dict[Configuration, int]
    objective: float
    status: SolveStatus = SolveStatus.OPTIMAL
    soft: bool = False

    @property
    def n_households(self) -> int:
        return sum(self.counts.values())

    @property
    def n_subsidized(self) -> int:
        return sum(n for g, n in self.counts.items() if g.subsidized)

    def violating(self, rule: ViolationRule = DEFAULT_RULE) -> Dict[Configuration, int]:
        return {g: n for g, n in self.counts.items() if n > 0 and rule.violates_configuration(g)}


class SolvarReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    block_id: str
    raw: int
    normalized: Optional[float]
    attributes: str
    subset: HouseholdSubset
    exact: bool


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

MATCH_KEY_PRESETS: Dict[str, Tuple[str, ...]] = {
    "HUD": ("subsidized", "bedroom", "race", "has_children"),
    "BROKER": ("race", "has_children"),
    "SF1": ("size", "race", "children"),
}


class Provenance(str, enum.Enum):
    RECONSTRUCTION = "RECONSTRUCTION"
    SAMPLING_BASELINE = "SAMPLING_BASELINE"


class MatchKey(BaseModel):
    """Identified partial microdata: household id -> projection onto `attributes`."""
    model_config = ConfigDict(frozen=True)

    name: str
    attributes: Tuple[str, ...]
    records: Dict[str, tuple]
    block_of: Dict[str, str]


class RankedCandidates(BaseModel):
    model_config = ConfigDict(frozen=True)

    entries: Tuple[Tuple[tuple, float], ...]
    provenance: Provenance

    def top(self, k: int) -> List[tuple]:
        return [projection for projection, _ in self.entries[:k]]


class CurvePoint(BaseModel):
    model_config = ConfigDict(frozen=True)

    provenance: Provenance
    match_key: str
    uniques_only: bool
    k: int
    precision: Optional[float]
    recall: Optional[float]
    match_rate: Optional[float]
    n_putative: int
    n_true: int


class AttackReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    scenario: str
    seed: int
    flagged_blocks: Tuple[str, ...]
    n_blocks: int
    n_true_violating_blocks: int
    n_inconsistent_blocks: int = 0
    n_undetermined_blocks: int = 0
    block_precision: Optional[float]
    block_recall: Optional[float]
    n_true_violations: int
    curves: Tuple[CurvePoint, ...] = ()
    solvar: Tuple[SolvarReport, ...] = ()
    # (block_id, putative violations, true violations) per flagged block
    violation_counts: Tuple[Tuple[str, int, int], ...] = ()

    @property
    def k_grid(self) -> Tuple[int, ...]:
        return tuple(sorted({p.k for p in self.curves}))

    def violation_correlation(self) -> Optional[float]:
        pairs = [(p, t) for _, p, t in self.violation_counts]
        if len(pairs) < 2:
            return None
        putative, true = np.array(pairs, dtype=float).T
        if putative.std() == 0 or true.std() == 0:
            return None
        return float(np.corrcoef(putative, true)[0, 1])


# ---------------------------------------------------------------------------
# Run registry tables
# ---------------------------------------------------------------------------

class ScenarioRun(Base):
    __tablename__ = "scenario_runs"

    id = Column(Integer, primary_key=True, index=True)
    run_key = Column(String, unique=True, nullable=False, index=True)  # scenario/seed/config hash
    scenario = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    config_hash = Column(String, nullable=False)
    status = Column(String, nullable=False)
    output_dir = Column(Text, nullable=False)
    block_precision = Column(Float, nullable=True)
    block_recall = Column(Float, nullable=True)
    n_flagged = Column(Integer, nullable=False, default=0)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)

    def __repr__(self):
        return f"<ScenarioRun(run_key='{self.run_key}', status={self.status})>"


class MetricRecord(Base):
    __tablename__ = "metric_records"
    __table_args__ = (UniqueConstraint("run_id", "provenance", "match_key", "uniques_only", "k", "metric"),)

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("scenario_runs.id", ondelete="CASCADE"), nullable=False, index=True)
    provenance = Column(String, nullable=False)
    match_key = Column(String, nullable=False)
    uniques_only = Column(Integer, nullable=False)
    k = Column(Integer, nullable=False)
    metric = Column(String, nullable=False)
    value = Column(Float, nullable=True)

    def __repr__(self):
        return f"<MetricRecord(run_id={self.run_id}, metric='{self.metric}', k={self.k})>"
