import hashlib
import json
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from models import (
    ALPHA_EXPONENT,
    DEFAULT_RACE_GROUPS,
    HISPANIC_GROUP,
    SIZE_CLASSES,
    TAIL_START,
    ConfigError,
    HouseholdSubset,
    MATCH_KEY_PRESETS,
    ATTRIBUTE_PRESETS,
    SwapConfig,
)

load_dotenv()

SCHEMA_VERSION = 1


class Settings(BaseModel):
    """Process-level settings taken from the environment (.env supported)."""
    log_level: str = "INFO"
    workers: int = Field(default=1, ge=1)
    output_dir: str = "runs"

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.getenv("HOUSELAB_LOG_LEVEL", "INFO"),
            workers=int(os.getenv("HOUSELAB_WORKERS", "1")),
            output_dir=os.getenv("HOUSELAB_OUTPUT_DIR", "runs"),
        )


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GenerationConfig(_Section):
    n_blocks: int = Field(default=200, ge=1)
    states: List[str] = Field(default_factory=lambda: ["01"])
    household_count_weights: Dict[int, float] = Field(
        default_factory=lambda: {n: 1.0 for n in range(11, 31)}
    )
    subsidized_fraction: float = Field(default=0.6, ge=0.0, le=1.0)
    enforce_suppression_floor: bool = True
    suppression_floor: int = Field(default=11, ge=0)
    size_class_weights: Dict[str, float] = Field(
        default_factory=lambda: {"1": 0.26, "2": 0.30, "3": 0.17, "4": 0.13, "5": 0.07, "6": 0.04, "7+": 0.03}
    )
    race_weights: Dict[str, float] = Field(
        default_factory=lambda: {
            "white_nh": 0.45, "black_nh": 0.25, "aian_nh": 0.02, "asian_nh": 0.06,
            "nhpi_nh": 0.01, "other_nh": 0.03, "hispanic": 0.18,
        }
    )
    children_probability: Dict[str, float] = Field(
        default_factory=lambda: {"1": 0.02, "2": 0.25, "3": 0.55, "4": 0.7, "5": 0.8, "6": 0.85, "7+": 0.9}
    )
    # reference population model behind the PUMS-like sample
    tail_decay: float = Field(default=0.45, gt=0.0, lt=1.0)
    tail_decay_with_children: float = Field(default=0.6, gt=0.0, lt=1.0)
    child_share: float = Field(default=0.45, ge=0.0, le=1.0)
    reference_households_per_state: int = Field(default=20000, ge=1)
    sample_fraction: float = Field(default=0.2, gt=0.0, le=1.0)
    bedroom_prior: Dict[str, float] = Field(default_factory=lambda: {"LE1": 0.35, "EQ2": 0.35, "GE3": 0.30})
    hud_binary_priors: Optional[Dict[str, float]] = None
    alpha: float = Field(default=1e-4, ge=0.0)
    alpha_exponent: float = Field(default=ALPHA_EXPONENT, gt=0.0)
    response_rate: float = Field(default=1.0, gt=0.0, le=1.0)
    max_household_size: int = Field(default=15, ge=TAIL_START)
    race_groups: List[str] = Field(default_factory=lambda: list(DEFAULT_RACE_GROUPS))

    @field_validator("size_class_weights", "children_probability")
    @classmethod
    def _size_classes(cls, table):
        unknown = set(table) - set(SIZE_CLASSES)
        if unknown:
            raise ValueError(f"unknown size classes {sorted(unknown)}")
        return table

    @model_validator(mode="after")
    def _check(self):
        if HISPANIC_GROUP not in self.race_groups:
            raise ValueError(f"race_groups must contain {HISPANIC_GROUP!r}")
        unknown = set(self.race_weights) - set(self.race_groups)
        if unknown:
            raise ValueError(f"race weights for unknown groups {sorted(unknown)}")
        if set(self.bedroom_prior) != {"LE1", "EQ2", "GE3"}:
            raise ValueError("bedroom_prior needs exactly LE1, EQ2, GE3")
        if abs(sum(self.bedroom_prior.values()) - 1.0) > 1e-9:
            raise ValueError("bedroom_prior must sum to 1")
        if any(n < 1 for n in self.household_count_weights):
            raise ValueError("household counts must be positive")
        if self.enforce_suppression_floor:
            smallest = min(n for n, w in self.household_count_weights.items() if w > 0)
            if self.suppression_floor > smallest:
                raise ValueError(
                    f"suppression floor {self.suppression_floor} needs n_s > N for blocks of {smallest} households"
                )
        return self

    def subsidized_count(self, n_total: int) -> int:
        n_s = int(round(self.subsidized_fraction * n_total))
        if self.enforce_suppression_floor:
            n_s = max(n_s, self.suppression_floor)
        return n_s


class MechanismConfig(_Section):
    kind: Literal["identity", "swap", "dp"] = "identity"
    swap: SwapConfig = Field(default_factory=SwapConfig)
    rho_person: float = Field(default=4.96, gt=0)
    rho_household: float = Field(default=7.70, gt=0)
    allocation: Literal["das", "uniform"] = "das"
    noise_hud: bool = False


class AttackConfig(_Section):
    t: int = Field(default=100, ge=1)
    t_floor: int = Field(default=10, ge=1)
    dynamic_t: bool = False
    enumeration_node_budget: int = Field(default=200_000, ge=1)
    node_limit: int = Field(default=50_000, ge=1)
    exact_lp_threshold: int = Field(default=24, ge=0)
    soft_lambda: float = Field(default=1.0, ge=0.0)
    soft_likelihood: Literal["prior", "zero"] = "prior"
    soft_for_inconsistent: bool = True
    max_race_flags: int = Field(default=1, ge=1)
    solvar_scope: Literal["flagged", "all", "none"] = "flagged"
    solvar_presets: List[str] = Field(default_factory=lambda: ["simple"])
    solvar_subsets: List[HouseholdSubset] = Field(default_factory=lambda: [HouseholdSubset.ALL])

    @field_validator("solvar_presets")
    @classmethod
    def _presets(cls, presets):
        unknown = set(presets) - set(ATTRIBUTE_PRESETS)
        if unknown:
            raise ValueError(f"unknown attribute presets {sorted(unknown)}")
        return presets


class EvaluationConfig(_Section):
    match_keys: List[str] = Field(default_factory=lambda: ["HUD", "BROKER", "SF1"])
    k_grid: List[int] = Field(default_factory=lambda: list(range(1, 51)))
    uniques: List[bool] = Field(default_factory=lambda: [False, True])
    baseline: bool = True
    baseline_sample_fraction: float = Field(default=0.2, gt=0.0, le=1.0)

    @field_validator("match_keys")
    @classmethod
    def _keys(cls, keys):
        unknown = set(keys) - set(MATCH_KEY_PRESETS)
        if unknown:
            raise ValueError(f"unknown match keys {sorted(unknown)}")
        return keys

    @field_validator("k_grid")
    @classmethod
    def _grid(cls, grid):
        if not grid or any(k < 1 for k in grid) or sorted(set(grid)) != list(grid):
            raise ValueError("k_grid must be strictly increasing positive integers")
        return grid


class ScenarioSpec(_Section):
    label: str
    mechanism: MechanismConfig = Field(default_factory=MechanismConfig)


class ScenarioConfig(_Section):
    schema_version: int = SCHEMA_VERSION
    name: str = "houselab"
    seeds: List[int] = Field(default_factory=lambda: [0])
    generation: GenerationConfig = Field(default_factory=GenerationConfig)
    scenarios: List[ScenarioSpec] = Field(default_factory=lambda: [ScenarioSpec(label="identity")])
    attack: AttackConfig = Field(default_factory=AttackConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    output_dir: Optional[str] = None
    record_runs: bool = True

    @field_validator("schema_version")
    @classmethod
    def _version(cls, version):
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema_version {version}; expected {SCHEMA_VERSION}")
        return version

    @model_validator(mode="after")
    def _unique_labels(self):
        labels = [s.label for s in self.scenarios]
        if len(labels) != len(set(labels)):
            raise ValueError("scenario labels must be unique")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    def scenario(self, label: Optional[str] = None) -> ScenarioSpec:
        if label is None:
            return self.scenarios[0]
        for spec in self.scenarios:
            if spec.label == label:
                return spec
        raise ConfigError(f"no scenario labelled {label!r}")

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def load_config(path: Optional[str]) -> ScenarioConfig:
    """Read a JSON scenario config; a missing path yields the default config."""
    if path is None:
        return ScenarioConfig()
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return ScenarioConfig.model_validate_json(text)
    except ValidationError as e:
        raise ConfigError(f"invalid config {path}: {e}") from e


def dump_config(config: ScenarioConfig, path: Path) -> None:
    path.write_text(json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True))
