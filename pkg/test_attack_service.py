import math
from collections import Counter

import numpy as np
import pytest

from attack_service import (
    BlockAttackResult,
    attack_block,
    build_block_program,
    build_space,
    classify_block,
    detect_violation_block,
    race_patterns,
    read_attack_results,
    reconstruct_mle,
    reconstruct_soft,
    reconstruct_topt,
    solution_variability,
    write_outcomes,
    write_reconstructions,
    write_solvar,
)
from config import AttackConfig
from models import (
    AttackError,
    BedroomClass,
    Block,
    BlockOutcome,
    Configuration,
    DEFAULT_RULE,
    HouseholdRecord,
    HouseholdSubset,
    Reconstruction,
    Sense,
    SolveStatus,
    StateTables,
    UNIT_BEDROOMS,
    project,
    race_bit,
)
from workload_service import SIZE_QUERY_SIZES, evaluate, size_query_id, standard_workload

WORKLOAD = standard_workload()
WHITE = 1


def renter(size, children=0, race_flags=WHITE):
    return HouseholdRecord(size=size, race_flags=race_flags, children=children)


def subsidized(size, bedroom, children=0, race_flags=WHITE):
    return HouseholdRecord(size=size, race_flags=race_flags, children=children, subsidized=True,
                           bedroom_class=bedroom)


def stats_of(*households, block_id="01-000001"):
    block = Block(block_id=block_id, geo_state="01", position=(0.0, 0.0), households=tuple(households))
    return evaluate(block, WORKLOAD)


def prior_of(counts) -> StateTables:
    return StateTables(geo_state="01", sample_size=sum(counts.values()), lattice_size=100,
                       configuration_counts=counts)


def reconstruction_of(stats, *households) -> Reconstruction:
    counts = {}
    for h in households:
        counts[h.configuration] = counts.get(h.configuration, 0) + 1
    return Reconstruction(block_id=stats.block_id, counts=counts, objective=0.0)


# truth: (5, GE3), (5, EQ2), (1, LE1); only the bedroom assignment is ambiguous
OVERCROWDED = (subsidized(5, BedroomClass.GE3), subsidized(5, BedroomClass.EQ2), subsidized(1, BedroomClass.LE1))
# one renter whose children count is ambiguous under the GE children statistic
TWO_SOLUTIONS = (renter(1), subsidized(1, BedroomClass.LE1))
TWO_SOLUTION_PRIOR = {(1, WHITE, 0): 9, (1, WHITE, 1): 1}


# configuration space

def test_race_patterns():
    assert race_patterns(3, 1) == [1, 2, 4]
    assert race_patterns(3, 2) == [1, 2, 4, 3, 5, 6]


def test_space_prunes_sizes_and_races():
    stats = stats_of(*OVERCROWDED)
    space = build_space(stats)
    assert {g.size for g in space.configurations} == {1, 5}
    assert {g.race_flags for g in space.configurations} == {WHITE}
    assert all(g.subsidized for g in space.configurations)
    assert all(g.children <= g.size for g in space.configurations)
    assert len(space) == (2 + 6) * 3


def test_space_opens_tail_for_residual():
    stats = stats_of(renter(8), subsidized(2, BedroomClass.EQ2))
    space = build_space(stats, max_household_size=10)
    assert {g.size for g in space.configurations} == set(range(1, 11))
    bedrooms = {g.bedroom for g in space.configurations if not g.subsidized}
    assert bedrooms == {int(BedroomClass.NONE)}


def test_space_keeps_all_patterns_without_race_cover():
    stats = stats_of(renter(2))
    answers = {q: v for q, v in stats.answers.items() if not q.startswith("sf1_race_")}
    reduced = stats.with_answers(answers, senses={q: stats.senses[q] for q in answers})
    space = build_space(reduced)
    assert {g.race_flags for g in space.configurations} == set(race_patterns(7, 1))


# detection

def test_overcrowded_block_is_flagged():
    stats = stats_of(*OVERCROWDED)
    assert classify_block(stats, build_space(stats)) == BlockOutcome.FLAGGED
    assert detect_violation_block(stats, build_space(stats))


def test_roomy_block_is_clear():
    stats = stats_of(subsidized(1, BedroomClass.LE1), subsidized(3, BedroomClass.EQ2), subsidized(3, BedroomClass.GE3))
    assert classify_block(stats, build_space(stats)) == BlockOutcome.CLEAR


def test_single_large_household_in_small_unit_is_flagged():
    stats = stats_of(subsidized(5, BedroomClass.LE1))
    assert classify_block(stats, build_space(stats)) == BlockOutcome.FLAGGED


def test_contradictory_statistics_are_inconsistent():
    stats = stats_of(*TWO_SOLUTIONS)
    broken = stats.with_answers({**stats.answers, "sf1_hh_size_1": 3})
    assert classify_block(broken, build_space(broken)) == BlockOutcome.INCONSISTENT


def random_households(rng, max_size):
    households = []
    for _ in range(int(rng.integers(1, 5))):
        size = int(rng.integers(1, max_size + 1))
        children = int(rng.integers(0, size + 1))
        if rng.random() < 0.3:
            households.append(renter(size, children))
        else:
            households.append(subsidized(size, BedroomClass(int(rng.integers(0, 3))), children))
    return households


def test_small_households_never_flagged():
    rng = np.random.default_rng(12)
    for _ in range(15):
        stats = stats_of(*random_households(rng, max_size=2))
        assert classify_block(stats, build_space(stats)) == BlockOutcome.CLEAR


def test_detection_is_sound_on_exact_statistics():
    rng = np.random.default_rng(21)
    for _ in range(15):
        households = random_households(rng, max_size=6)
        stats = stats_of(*households)
        outcome = classify_block(stats, build_space(stats))
        truly_violating = any(DEFAULT_RULE.violates(h) for h in households)
        assert outcome in (BlockOutcome.FLAGGED, BlockOutcome.CLEAR)
        if outcome == BlockOutcome.FLAGGED:
            assert truly_violating
        if not truly_violating:
            assert outcome == BlockOutcome.CLEAR


def test_truth_satisfies_relaxed_program():
    stats = stats_of(*OVERCROWDED)
    space = build_space(stats)
    program = build_block_program(stats, space, forbid_violations=False)
    index = space.index()
    truth = [0] * len(space)
    for h in OVERCROWDED:
        truth[index[h.configuration]] += 1
    assert program.is_feasible(truth)
    assert not build_block_program(stats, space, forbid_violations=True).is_feasible(truth)


def test_empty_space_rejected():
    stats = stats_of(renter(1))
    empty = build_space(stats).model_copy(update={"configurations": ()})
    with pytest.raises(AttackError):
        build_block_program(stats, empty, forbid_violations=False)


# reconstruction

def test_mle_prefers_likely_configuration():
    stats = stats_of(*TWO_SOLUTIONS)
    prior = prior_of(TWO_SOLUTION_PRIOR)
    recon = reconstruct_mle(stats, build_space(stats), prior)
    assert recon.status == SolveStatus.OPTIMAL
    assert recon.counts == {
        Configuration(1, WHITE, 0, False, int(BedroomClass.NONE)): 1,
        Configuration(1, WHITE, 0, True, int(BedroomClass.LE1)): 1,
    }
    assert recon.objective == pytest.approx(-2 * math.log(0.9))


def test_mle_infeasible_without_soft():
    stats = stats_of(*TWO_SOLUTIONS)
    broken = stats.with_answers({**stats.answers, "sf1_hh_size_1": 3})
    recon = reconstruct_mle(broken, build_space(broken), prior_of(TWO_SOLUTION_PRIOR))
    assert recon.status == SolveStatus.INFEASIBLE
    assert recon.counts == {}


def test_topt_enumerates_every_solution():
    stats = stats_of(*TWO_SOLUTIONS)
    found = reconstruct_topt(stats, build_space(stats), prior_of(TWO_SOLUTION_PRIOR), t=5)
    assert not found.truncated
    assert len(found.reconstructions) == 2
    objectives = [r.objective for r in found.reconstructions]
    assert objectives == pytest.approx([-2 * math.log(0.9), -math.log(0.9) - math.log(0.1)])


def test_topt_reduces_t_within_budget():
    stats = stats_of(*OVERCROWDED)
    space = build_space(stats)
    prior = prior_of({(1, WHITE, 0): 5, (5, WHITE, 0): 5})
    reduced = complete = 0
    for budget in range(1, 200):
        found = reconstruct_topt(stats, space, prior, t=8, node_budget=budget, t_floor=1)
        if found.truncated:
            assert found.t_used == len(found.reconstructions) == 0
        elif len(found.reconstructions) == 3:
            assert found.t_used == 8
            complete += 1
        else:
            assert found.t_used == len(found.reconstructions)
            assert found.t_used in (1, 2)
            reduced += 1
    assert reduced and complete


def test_soft_matches_mle_on_exact_statistics():
    stats = stats_of(*TWO_SOLUTIONS)
    prior = prior_of(TWO_SOLUTION_PRIOR)
    space = build_space(stats)
    mle = reconstruct_mle(stats, space, prior)
    soft = reconstruct_soft(stats, space, prior, lam=1.0)
    assert soft.soft
    assert soft.counts == mle.counts
    assert soft.objective == pytest.approx(mle.objective)


def test_soft_pays_for_unsatisfiable_statistic():
    stats = stats_of(*TWO_SOLUTIONS)
    prior = prior_of(TWO_SOLUTION_PRIOR)
    mle = reconstruct_mle(stats, build_space(stats), prior)
    broken = stats.with_answers({**stats.answers, "sf1_hh_size_1": 3})
    soft = reconstruct_mle(broken, build_space(broken), prior, soft_lambda=2.5)
    assert soft.soft
    assert soft.counts == mle.counts
    assert soft.objective == pytest.approx(mle.objective + 2.5)


def test_soft_zero_likelihood_and_bad_arguments():
    stats = stats_of(*TWO_SOLUTIONS)
    space = build_space(stats)
    recon = reconstruct_soft(stats, space, None, lam=1.0, likelihood="zero")
    assert recon.objective == pytest.approx(0.0)
    assert recon.n_households == 2
    with pytest.raises(AttackError):
        reconstruct_soft(stats, space, None, lam=1.0)
    with pytest.raises(AttackError):
        reconstruct_soft(stats, space, None, lam=-1.0, likelihood="zero")


# solution variability

def test_solvar_of_ambiguous_bedrooms():
    stats = stats_of(*OVERCROWDED)
    space = build_space(stats)
    truth = reconstruction_of(stats, *OVERCROWDED)
    report = solution_variability(truth, stats, space, "full")
    assert report.raw == 4
    assert report.normalized == pytest.approx(4 / 6)
    assert report.exact
    violating = solution_variability(truth, stats, space, "full", HouseholdSubset.VIOLATING)
    assert violating.raw == 2
    assert violating.normalized == pytest.approx(1.0)


def test_solvar_of_unique_block_is_zero():
    households = (subsidized(5, BedroomClass.LE1),)
    stats = stats_of(*households)
    report = solution_variability(reconstruction_of(stats, *households), stats, build_space(stats), "full")
    assert report.raw == 0
    assert report.normalized == 0.0


def test_solvar_of_two_solutions():
    stats = stats_of(*TWO_SOLUTIONS)
    truth = reconstruction_of(stats, *TWO_SOLUTIONS)
    report = solution_variability(truth, stats, build_space(stats), "full")
    assert report.raw == 2
    assert report.normalized == pytest.approx(0.5)
    # the ambiguity is confined to the renter
    subsidized_only = solution_variability(truth, stats, build_space(stats), "full", HouseholdSubset.SUBSIDIZED)
    assert subsidized_only.raw == 0


def test_solvar_without_violations_has_no_normalized_value():
    stats = stats_of(*TWO_SOLUTIONS)
    truth = reconstruction_of(stats, *TWO_SOLUTIONS)
    report = solution_variability(truth, stats, build_space(stats), ("size",), HouseholdSubset.VIOLATING)
    assert report.raw == 0
    assert report.normalized is None
    assert report.attributes == "size"


def test_solvar_needs_hard_reconstruction():
    stats = stats_of(*TWO_SOLUTIONS)
    soft = reconstruct_soft(stats, build_space(stats), prior_of(TWO_SOLUTION_PRIOR), lam=1.0)
    with pytest.raises(AttackError):
        solution_variability(soft, stats, build_space(stats))


# per-block attack and files

def test_attack_block_flagged():
    stats = stats_of(*OVERCROWDED)
    config = AttackConfig(t=5, solvar_presets=["full"],
                          solvar_subsets=[HouseholdSubset.ALL, HouseholdSubset.SUBSIDIZED])
    result = attack_block(stats, prior_of({(1, WHITE, 0): 5, (5, WHITE, 0): 5}), config)
    assert result.outcome == BlockOutcome.FLAGGED
    assert len(result.reconstructions) == 3
    assert all(r.violating() for r in result.reconstructions)
    assert [s.raw for s in result.solvar] == [4, 4]
    assert [s.normalized for s in result.solvar] == pytest.approx([4 / 6, 4 / 6])


def test_attack_block_clear_skips_reconstruction():
    stats = stats_of(*TWO_SOLUTIONS)
    result = attack_block(stats, prior_of(TWO_SOLUTION_PRIOR), AttackConfig())
    assert result.outcome == BlockOutcome.CLEAR
    assert result.reconstructions == ()
    assert result.solvar == ()


def test_attack_block_clear_with_solvar_everywhere():
    stats = stats_of(*TWO_SOLUTIONS)
    config = AttackConfig(solvar_scope="all", solvar_presets=["full"])
    result = attack_block(stats, prior_of(TWO_SOLUTION_PRIOR), config)
    assert result.reconstructions == ()
    assert [s.raw for s in result.solvar] == [2]


def test_attack_block_inconsistent_uses_soft():
    stats = stats_of(*TWO_SOLUTIONS)
    broken = stats.with_answers({**stats.answers, "sf1_hh_size_1": 3})
    result = attack_block(broken, prior_of(TWO_SOLUTION_PRIOR), AttackConfig())
    assert result.outcome == BlockOutcome.INCONSISTENT
    assert len(result.reconstructions) == 1 and result.reconstructions[0].soft
    skipped = attack_block(broken, prior_of(TWO_SOLUTION_PRIOR), AttackConfig(soft_for_inconsistent=False))
    assert skipped.reconstructions == ()


def test_attack_files_read_back(tmp_path):
    flagged = attack_block(stats_of(*OVERCROWDED), prior_of({(1, WHITE, 0): 5, (5, WHITE, 0): 5}),
                           AttackConfig(t=2, solvar_subsets=[HouseholdSubset.ALL, HouseholdSubset.VIOLATING]))
    clear = attack_block(stats_of(*TWO_SOLUTIONS, block_id="01-000002"), prior_of(TWO_SOLUTION_PRIOR),
                         AttackConfig())
    results = [flagged, clear]
    write_outcomes(results, tmp_path / "outcomes.tsv")
    write_reconstructions(results, tmp_path / "reconstructions.tsv")
    write_solvar(results, tmp_path / "solvar.tsv")
    loaded = read_attack_results(tmp_path / "outcomes.tsv", tmp_path / "reconstructions.tsv",
                                 tmp_path / "solvar.tsv")
    assert [r.block_id for r in loaded] == ["01-000001", "01-000002"]
    assert [r.outcome for r in loaded] == [BlockOutcome.FLAGGED, BlockOutcome.CLEAR]
    assert [r.counts for r in loaded[0].reconstructions] == [r.counts for r in flagged.reconstructions]
    assert [r.objective for r in loaded[0].reconstructions] == pytest.approx(
        [r.objective for r in flagged.reconstructions])
    assert [(s.raw, s.subset, s.exact) for s in loaded[0].solvar] == [(s.raw, s.subset, s.exact)
                                                                      for s in flagged.solvar]
    assert loaded[1] == BlockAttackResult(block_id="01-000002", outcome=BlockOutcome.CLEAR, t_used=0)


# exhaustive assignment cross-checks

TWO_GROUPS = ("white_nh", "hispanic")
TWO_GROUP_WORKLOAD = standard_workload(TWO_GROUPS)
NUDGED = (
    "sf1_population", "sf1_children", "sf1_race_white_nh", "hud_householder_white_nh",
    "hud_hispanic_householder", "hud_households_with_children",
    "hud_bedrooms_le1", "hud_bedrooms_eq2", "hud_bedrooms_ge3",
)


def slot_options(size):
    statuses = [(False, BedroomClass.NONE)] + [(True, b) for b in UNIT_BEDROOMS]
    return [
        Configuration(size, race_bit(r), children, flag, int(bedroom))
        for r in range(len(TWO_GROUPS)) for children in range(size + 1) for flag, bedroom in statuses
    ]


class AssignmentOracle:
    """Scores every household-by-household assignment against a block's statistics."""

    def __init__(self, stats):
        queries = {q.id: q for q in TWO_GROUP_WORKLOAD}
        ids = list(stats.answers)
        # the size counts cover every household, so they fix the sizes
        sizes = [x for x in SIZE_QUERY_SIZES for _ in range(stats.answers[size_query_id(x)])]
        assert len(sizes) == stats.n_total
        self.options = [slot_options(size) for size in sizes]

        answers = np.array([stats.answers[i] for i in ids] + [stats.n_subsidized])
        exact = np.array([stats.senses[i] == Sense.EQ for i in ids] + [True])
        totals = np.zeros((1, len(answers)), dtype=np.int16)
        violating = np.zeros(1, dtype=bool)
        for options in self.options:
            contribution = np.array(
                [[queries[i].contribution(g) for i in ids] + [int(g.subsidized)] for g in options], dtype=np.int16,
            )
            flags = np.array([DEFAULT_RULE.violates_configuration(g) for g in options])
            totals = (totals[:, None, :] + contribution[None, :, :]).reshape(-1, len(answers))
            violating = (violating[:, None] | flags[None, :]).reshape(-1)
        self.consistent = np.where(exact, totals == answers, totals >= answers).all(axis=1)
        self.violating = violating

    def outcome(self) -> BlockOutcome:
        if not self.consistent.any():
            return BlockOutcome.INCONSISTENT
        if (self.consistent & ~self.violating).any():
            return BlockOutcome.CLEAR
        return BlockOutcome.FLAGGED

    def assignments(self):
        shape = [len(options) for options in self.options]
        for row in np.flatnonzero(self.consistent):
            picks = np.unravel_index(row, shape)
            yield [options[k] for options, k in zip(self.options, picks)]


def two_group_households(rng, n_max=4):
    n = int(rng.integers(2, n_max + 1))
    max_size = 3 if n == 4 else 5
    households = []
    for _ in range(n):
        size = int(rng.integers(1, max_size + 1))
        children = int(rng.integers(0, size + 1))
        flags = race_bit(int(rng.integers(0, len(TWO_GROUPS))))
        if rng.random() < 0.3:
            households.append(renter(size, children, flags))
        else:
            households.append(subsidized(size, BedroomClass(int(rng.integers(0, 3))), children, flags))
    return households


def two_group_stats(households):
    block = Block(block_id="01-000001", geo_state="01", position=(0.0, 0.0), households=tuple(households))
    return evaluate(block, TWO_GROUP_WORKLOAD)


def test_detection_matches_exhaustive_assignments():
    rng = np.random.default_rng(31)
    seen = Counter()
    for _ in range(30):
        stats = two_group_stats(two_group_households(rng))
        expected = AssignmentOracle(stats).outcome()
        outcome = classify_block(stats, build_space(stats, TWO_GROUPS), workload=TWO_GROUP_WORKLOAD)
        assert outcome == expected
        seen[outcome] += 1
    assert seen[BlockOutcome.FLAGGED] and seen[BlockOutcome.CLEAR]


def test_detection_on_nudged_statistics_matches_exhaustive_assignments():
    rng = np.random.default_rng(32)
    seen = Counter()
    for _ in range(30):
        stats = two_group_stats(two_group_households(rng))
        answers = dict(stats.answers)
        for query_id in rng.choice(NUDGED, size=int(rng.integers(1, 3)), replace=False):
            answers[query_id] = max(0, answers[query_id] + int(rng.choice([-1, 1])))
        nudged = stats.with_answers(answers)
        expected = AssignmentOracle(nudged).outcome()
        space = build_space(nudged, TWO_GROUPS)
        outcome = classify_block(nudged, space, workload=TWO_GROUP_WORKLOAD)
        assert outcome == expected
        assert detect_violation_block(nudged, space, workload=TWO_GROUP_WORKLOAD) == (
            expected == BlockOutcome.FLAGGED)
        seen[outcome] += 1
    assert seen[BlockOutcome.INCONSISTENT] and seen[BlockOutcome.INCONSISTENT] < 30


def histogram(households, attributes):
    return Counter(project(g, attributes) for g in households)


def test_solvar_matches_exhaustive_assignments():
    rng = np.random.default_rng(33)
    attributes = ("size", "bedroom")
    for _ in range(8):
        households = two_group_households(rng, n_max=3)
        stats = two_group_stats(households)
        truth = reconstruction_of(stats, *households)
        report = solution_variability(truth, stats, build_space(stats, TWO_GROUPS), attributes,
                                      workload=TWO_GROUP_WORKLOAD)
        reference = histogram([h.configuration for h in households], attributes)
        widest = max(
            sum(((histogram(a, attributes) - reference) + (reference - histogram(a, attributes))).values())
            for a in AssignmentOracle(stats).assignments()
        )
        assert report.exact
        assert report.raw == widest
        assert report.normalized == pytest.approx(widest / (2 * stats.n_total))


def test_mle_matches_exhaustive_argmin():
    rng = np.random.default_rng(34)
    for _ in range(10):
        households = two_group_households(rng, n_max=3)
        stats = two_group_stats(households)
        counts = {
            (size, race_bit(r), children): int(rng.integers(0, 6))
            for size in range(1, 6) for r in range(len(TWO_GROUPS)) for children in range(size + 1)
        }
        for h in households:
            counts[h.configuration.sf1_key] = max(1, counts[h.configuration.sf1_key])
        prior = prior_of(counts)

        costs = []
        for assignment in AssignmentOracle(stats).assignments():
            seen = [counts[g.sf1_key] for g in assignment]
            if all(seen):
                costs.append((sum(-math.log(c / prior.sample_size) for c in seen), Counter(assignment)))
        best = min(cost for cost, _ in costs)

        recon = reconstruct_mle(stats, build_space(stats, TWO_GROUPS), prior, workload=TWO_GROUP_WORKLOAD)
        assert recon.status == SolveStatus.OPTIMAL
        assert recon.objective == pytest.approx(best)
        assert Counter(recon.counts) in [c for cost, c in costs if cost == pytest.approx(best)]
