from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from models import SolveStatus, SolverError
from rational_lp import LPStatus, solve_exact
from solver_service import (
    IntegerProgram,
    LinearConstraintRow,
    SENSES,
    SolveLimits,
    enumerate_top,
    maximize_l1,
    solve,
    solve_milp,
    to_lp_format,
)

# leaf enumeration off, so the relaxations do the work
EXACT_BOUNDS = SolveLimits(leaf_size=0)
FLOAT_BOUNDS = SolveLimits(exact_lp_threshold=0, leaf_size=0)


def row(coefficients, sense, rhs):
    return LinearConstraintRow(coefficients=dict(enumerate(coefficients)), sense=sense, rhs=rhs)


def micro_program(cost=(1.5, 0.7, 2.0)):
    return IntegerProgram(
        labels=(("a", 0), ("a", 1), ("b", 0)),
        upper=(3, 2, 2),
        constraints=(row([1, 1, 1], "EQ", 4), row([1, 2, 0], "GE", 3)),
        cost=cost,
    )


def brute_force(ip):
    points = product(*(range(u + 1) for u in ip.upper))
    return sorted((ip.objective(p), p) for p in points if ip.is_feasible(p))


# exact simplex

def test_exact_lp_optimum():
    result = solve_exact([-1, -1], [[1, 2], [3, 1]], ["LE", "LE"], [4, 6], [0, 0], [10, 10])
    assert result.status == LPStatus.OPTIMAL
    assert result.x == [Fraction(8, 5), Fraction(6, 5)]
    assert result.value == Fraction(-14, 5)


def test_exact_lp_infeasible():
    result = solve_exact([1], [[1]], ["GE"], [5], [0], [3])
    assert result.status == LPStatus.INFEASIBLE


def test_exact_lp_equality_and_lower_bounds():
    result = solve_exact([1, 1], [[1, 1]], ["EQ"], [5], [2, 1], [None, None])
    assert result.status == LPStatus.OPTIMAL
    assert result.value == 5
    assert result.x[0] >= 2 and result.x[1] >= 1


# branch and bound

@pytest.mark.parametrize("limits", [None, EXACT_BOUNDS, FLOAT_BOUNDS])
def test_solve_matches_brute_force(limits):
    ip = micro_program()
    best_value, _ = brute_force(ip)[0]
    solution = solve(ip, limits)
    assert solution.status == SolveStatus.OPTIMAL
    assert ip.is_feasible(solution.values)
    assert solution.objective_value == pytest.approx(best_value)


@pytest.mark.parametrize("limits", [None, EXACT_BOUNDS, FLOAT_BOUNDS])
def test_enumerate_top_objective_sequence(limits):
    ip = micro_program()
    oracle = brute_force(ip)
    enumeration = enumerate_top(ip, t=len(oracle) + 3, limits=limits)
    assert not enumeration.truncated
    assert [s.objective_value for s in enumeration.solutions] == pytest.approx([v for v, _ in oracle])
    assert len({s.values for s in enumeration.solutions}) == len(oracle)


def test_enumerate_top_stops_at_t():
    enumeration = enumerate_top(micro_program(), t=2)
    assert len(enumeration.solutions) == 2
    assert enumeration.solutions[0].objective_value <= enumeration.solutions[1].objective_value


def test_enumerate_top_truncates_on_budget():
    enumeration = enumerate_top(micro_program(), t=50, node_budget=1)
    assert enumeration.truncated


def test_enumerate_top_rejects_bad_input():
    with pytest.raises(SolverError):
        enumerate_top(micro_program(), t=0)
    with pytest.raises(SolverError):
        enumerate_top(micro_program(cost=None), t=1)


def test_feasibility_and_infeasibility():
    total = IntegerProgram(labels=(0, 1), upper=(5, 5), constraints=(row([1, 1], "EQ", 3),))
    solution = solve(total)
    assert solution.status == SolveStatus.OPTIMAL
    assert sum(solution.values) == 3

    contradictory = IntegerProgram(
        labels=(0, 1), upper=(5, 5), constraints=(row([1, 1], "GE", 2), row([1, 1], "LE", 1)),
    )
    assert solve(contradictory).status == SolveStatus.INFEASIBLE
    assert solve(contradictory, FLOAT_BOUNDS).status == SolveStatus.INFEASIBLE


def test_fractional_relaxation_needs_branching():
    # 2x + 2y = 3 has a relaxation optimum but no integer point
    ip = IntegerProgram(labels=(0, 1), upper=(3, 3), constraints=(row([2, 2], "EQ", 3),), cost=(1.0, 1.0))
    assert solve(ip, EXACT_BOUNDS).status == SolveStatus.INFEASIBLE
    assert solve(ip, FLOAT_BOUNDS).status == SolveStatus.INFEASIBLE


def test_node_limit_reports_bound_reached():
    ip = IntegerProgram(labels=(0, 1), upper=(3, 3), constraints=(row([2, 2], "EQ", 3),), cost=(1.0, 1.0))
    assert solve(ip, SolveLimits(node_limit=1, leaf_size=0)).status == SolveStatus.BOUND_REACHED


def test_large_program_uses_float_bounds():
    costs = tuple(float((7 * j) % 11) for j in range(30))
    ip = IntegerProgram(
        labels=tuple(range(30)), upper=(1,) * 30, constraints=(row([1] * 30, "EQ", 4),), cost=costs,
    )
    solution = solve(ip)
    assert solution.status == SolveStatus.OPTIMAL
    assert solution.objective_value == pytest.approx(sum(sorted(costs)[:4]))


def test_exclusions_forbid_vectors():
    ip = micro_program()
    first = solve(ip)
    second = solve(ip.with_exclusions([first.values]))
    assert second.values != first.values
    assert second.objective_value >= first.objective_value


# L1 maximization

def test_maximize_l1_matches_brute_force():
    ip = micro_program()
    oracle = brute_force(ip)
    reference = oracle[0][1]
    projection = lambda label: label[0]

    def distance(point):
        cells = {}
        for (label, r, p) in zip(ip.labels, reference, point):
            cells.setdefault(projection(label), [0, 0])
            cells[projection(label)][0] += r
            cells[projection(label)][1] += p
        return sum(abs(r - p) for r, p in cells.values())

    value, exact = maximize_l1(ip, reference, projection)
    assert exact
    assert value == max(distance(p) for _, p in oracle)


def test_maximize_l1_unique_solution_is_zero():
    ip = IntegerProgram(labels=(0, 1), upper=(2, 2), constraints=(row([1, 0], "EQ", 2), row([0, 1], "EQ", 1)))
    assert maximize_l1(ip, (2, 1), lambda label: label) == (0, True)


def test_maximize_l1_rejects_infeasible_reference():
    with pytest.raises(SolverError):
        maximize_l1(micro_program(), (0, 0, 0), lambda label: label)


# export and cross-check

def test_lp_format_lists_everything():
    text = to_lp_format(micro_program().with_exclusions([(2, 1, 1)]))
    assert "\\ excluded: 2 1 1" in text
    assert " c0: + 1 x0 + 1 x1 + 1 x2 = 4" in text
    assert " 0 <= x2 <= 2" in text
    assert text.rstrip().endswith("End")


def test_milp_backend_agrees():
    ip = micro_program()
    assert solve_milp(ip).objective_value == pytest.approx(solve(ip).objective_value)
    with pytest.raises(SolverError):
        solve_milp(ip.with_exclusions([(2, 1, 1)]))


def test_small_box_is_enumerated_at_the_root():
    ip = micro_program()
    solution = solve(ip)
    assert solution.nodes == 1
    assert solution.values == brute_force(ip)[0][1]


def test_branching_fixes_variables_in_the_exact_relaxation():
    # the odd right-hand side forces x2 odd; x0 ends up pinned at its bound
    ip = IntegerProgram(labels=(0, 1, 2), upper=(2, 2, 4), constraints=(row([2, 2, 1], "EQ", 5),), cost=(1.0, 1.2, 3.0))
    solution = solve(ip, EXACT_BOUNDS)
    assert solution.values == (2, 0, 1) == brute_force(ip)[0][1]
    assert solution.objective_value == pytest.approx(5.0)


# randomized cross-check against exhaustive search

def random_program(rng):
    n = int(rng.integers(1, 6))
    upper = tuple(int(u) for u in rng.integers(0, 4, size=n))
    k = int(rng.integers(0, min(5, sum(upper)) + 1))
    constraints = [row([1] * n, "EQ", k)]
    for _ in range(int(rng.integers(1, 3))):
        coefficients = [int(a) for a in rng.integers(0, 3, size=n)]
        reach = sum(a * u for a, u in zip(coefficients, upper))
        constraints.append(row(coefficients, SENSES[int(rng.integers(0, 3))], int(rng.integers(0, reach + 1))))
    cost = tuple(float(c) for c in rng.uniform(0.1, 3.0, size=n))
    return IntegerProgram(labels=tuple(range(n)), upper=upper, constraints=tuple(constraints), cost=cost)


def l1_distance(point, reference):
    cells = {}
    for j, (p, r) in enumerate(zip(point, reference)):
        cells[j // 2] = cells.get(j // 2, 0) + p - r
    return sum(abs(d) for d in cells.values())


@pytest.mark.parametrize("limits", [
    SolveLimits(leaf_size=4),
    SolveLimits(exact_lp_threshold=0, leaf_size=4),
])
def test_random_programs_match_exhaustive_search(limits):
    rng = np.random.default_rng(20240611)
    for _ in range(1000):
        ip = random_program(rng)
        oracle = brute_force(ip)

        solution = solve(ip, limits)
        if not oracle:
            assert solution.status == SolveStatus.INFEASIBLE
            assert enumerate_top(ip, 5, limits).solutions == []
            continue
        assert solution.status == SolveStatus.OPTIMAL
        assert solution.values == oracle[0][1]

        enumeration = enumerate_top(ip, 5, limits)
        assert not enumeration.truncated
        assert [s.values for s in enumeration.solutions] == [p for _, p in oracle[:5]]
        assert [s.objective_value for s in enumeration.solutions] == pytest.approx([v for v, _ in oracle[:5]])

        reference = oracle[0][1]
        value, exact = maximize_l1(ip, reference, lambda label: label // 2, limits=limits)
        assert exact
        assert value == max(l1_distance(p, reference) for _, p in oracle)
