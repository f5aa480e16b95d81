import logging
import math
import time
from fractions import Fraction
from itertools import product
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from models import SolveStatus, SolverError
from rational_lp import LPStatus, solve_exact

logger = logging.getLogger(__name__)

FLOAT_MARGIN = 1e-6
INTEGRALITY_TOL = 1e-6
SENSES = ("EQ", "GE", "LE")


# ---------------------------------------------------------------------------
# Model types
# ---------------------------------------------------------------------------

class LinearConstraintRow(BaseModel):
    """sum(coefficients[j] * x_j) (sense) rhs, with integer data."""
    model_config = ConfigDict(frozen=True)

    coefficients: Dict[int, int]
    sense: str
    rhs: int
    name: str = ""

    @model_validator(mode="after")
    def _check(self):
        if self.sense not in SENSES:
            raise ValueError(f"unknown sense {self.sense!r}")
        return self


class IntegerProgram(BaseModel):
    """
    Non-negative bounded integer counts, linear constraints, optional linear cost.

    `exclusions` forbid previously found count vectors over the first
    `n_primary` variables (all of them by default); auxiliary variables after
    that are free to differ.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    labels: Tuple[Any, ...]
    upper: Tuple[int, ...]
    constraints: Tuple[LinearConstraintRow, ...] = ()
    cost: Optional[Tuple[float, ...]] = None
    exclusions: Tuple[Tuple[int, ...], ...] = ()
    n_primary: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        n = len(self.labels)
        if len(self.upper) != n:
            raise ValueError("one upper bound per variable is required")
        if any(u < 0 for u in self.upper):
            raise ValueError("upper bounds must be non-negative")
        if self.cost is not None and len(self.cost) != n:
            raise ValueError("cost vector length differs from the variable count")
        for row in self.constraints:
            if any(j < 0 or j >= n for j in row.coefficients):
                raise ValueError(f"constraint {row.name!r} references an unknown variable")
        primary = self.primary_count
        if any(len(e) != primary for e in self.exclusions):
            raise ValueError("exclusion vectors must cover the primary variables")
        return self

    @property
    def n_variables(self) -> int:
        return len(self.labels)

    @property
    def primary_count(self) -> int:
        return len(self.labels) if self.n_primary is None else self.n_primary

    def with_exclusions(self, exclusions) -> "IntegerProgram":
        return self.model_copy(update={"exclusions": tuple(tuple(e) for e in exclusions)})

    def satisfies(self, values: Sequence[int]) -> bool:
        """Exact integer check of bounds and constraints."""
        if len(values) != self.n_variables:
            return False
        if any(v < 0 or v > u for v, u in zip(values, self.upper)):
            return False
        for row in self.constraints:
            lhs = sum(a * values[j] for j, a in row.coefficients.items())
            if row.sense == "EQ" and lhs != row.rhs:
                return False
            if row.sense == "GE" and lhs < row.rhs:
                return False
            if row.sense == "LE" and lhs > row.rhs:
                return False
        return True

    def is_feasible(self, values: Sequence[int]) -> bool:
        """Bounds, constraints and exclusions."""
        return self.satisfies(values) and tuple(values[:self.primary_count]) not in set(self.exclusions)

    def objective(self, values: Sequence[int]) -> float:
        if self.cost is None:
            return 0.0
        return float(math.fsum(c * v for c, v in zip(self.cost, values)))


class SolveLimits(BaseModel):
    model_config = ConfigDict(frozen=True)

    node_limit: int = Field(default=50_000, ge=1)
    time_limit: Optional[float] = Field(default=None, gt=0)
    exact_lp_threshold: int = Field(default=24, ge=0)
    leaf_size: int = Field(default=64, ge=0)


class Solution(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    status: SolveStatus
    values: Optional[Tuple[int, ...]] = None
    objective_value: Optional[float] = None
    labels: Tuple[Any, ...] = ()
    nodes: int = 0
    seconds: float = 0.0

    @property
    def feasible(self) -> bool:
        return self.status in (SolveStatus.OPTIMAL, SolveStatus.FEASIBLE)

    @property
    def counts(self) -> Dict[Any, int]:
        if self.values is None:
            return {}
        return {label: v for label, v in zip(self.labels, self.values) if v > 0}


class Enumeration(BaseModel):
    """Solutions in non-decreasing objective order; `truncated` when a limit stopped the search."""
    model_config = ConfigDict(frozen=True)

    solutions: List[Solution]
    truncated: bool = False
    nodes: int = 0


# ---------------------------------------------------------------------------
# LP relaxations
# ---------------------------------------------------------------------------

class _Relaxation:
    """Dense matrices of one program, shared by every node of its search."""

    def __init__(self, ip: IntegerProgram, limits: SolveLimits):
        n = ip.n_variables
        self.ip = ip
        self.cost = np.array(ip.cost if ip.cost is not None else [0.0] * n, dtype=float)
        self.integer_cost = ip.cost is not None and all(float(c).is_integer() for c in ip.cost)
        eq = [r for r in ip.constraints if r.sense == "EQ"]
        ub = [r for r in ip.constraints if r.sense != "EQ"]
        self.A_eq, self.b_eq = self._dense(eq, n)
        self.A_ub, self.b_ub = self._dense(ub, n, flip=True)
        self.exact = n <= limits.exact_lp_threshold
        if self.exact:
            self.rows = [[r.coefficients.get(j, 0) for j in range(n)] for r in ip.constraints]
            self.senses = [r.sense for r in ip.constraints]
            self.rhs = [r.rhs for r in ip.constraints]
            self.exact_cost = [Fraction(c) for c in self.cost]

    @staticmethod
    def _dense(rows, n, flip=False):
        if not rows:
            return None, None
        A = np.zeros((len(rows), n))
        b = np.zeros(len(rows))
        for i, r in enumerate(rows):
            sign = -1.0 if flip and r.sense == "GE" else 1.0
            for j, a in r.coefficients.items():
                A[i, j] = sign * a
            b[i] = sign * r.rhs
        return A, b

    def solve(self, lo: np.ndarray, hi: np.ndarray):
        """Returns (state, x, bound): state in {"optimal", "infeasible", "unknown"}."""
        if self.exact:
            return self._solve_exact(lo.tolist(), hi.tolist())

        res = linprog(
            self.cost, A_ub=self.A_ub, b_ub=self.b_ub, A_eq=self.A_eq, b_eq=self.b_eq,
            bounds=list(zip(lo.tolist(), hi.tolist())), method="highs",
        )
        if res.status == 0:
            return "optimal", res.x, float(res.fun) - FLOAT_MARGIN
        if res.status == 2 and self._violation(lo, hi) > FLOAT_MARGIN:
            return "infeasible", None, None
        return "unknown", None, None

    def _solve_exact(self, lo: List[int], hi: List[int]):
        # fixed variables move into the right-hand sides
        free = [j for j in range(len(lo)) if lo[j] < hi[j]]
        offset = sum((self.exact_cost[j] * lo[j] for j in range(len(lo)) if lo[j] == hi[j]), Fraction(0))
        rows, senses, rhs = [], [], []
        for row, sense, b in zip(self.rows, self.senses, self.rhs):
            rest = b - sum(a * lo[j] for j, a in enumerate(row) if a and lo[j] == hi[j])
            reduced = [row[j] for j in free]
            if any(reduced):
                rows.append(reduced)
                senses.append(sense)
                rhs.append(rest)
            elif (sense == "EQ" and rest != 0) or (sense == "GE" and rest > 0) or (sense == "LE" and rest < 0):
                return "infeasible", None, None
        if not free:
            return "optimal", [Fraction(v) for v in lo], offset

        result = solve_exact([self.exact_cost[j] for j in free], rows, senses, rhs,
                             [lo[j] for j in free], [hi[j] for j in free])
        if result.status == LPStatus.INFEASIBLE:
            return "infeasible", None, None
        if result.status != LPStatus.OPTIMAL:
            return "unknown", None, None
        x = [Fraction(v) for v in lo]
        for j, value in zip(free, result.x):
            x[j] = value
        return "optimal", x, result.value + offset

    def _violation(self, lo, hi) -> float:
        """Least total constraint violation over the box; > margin certifies infeasibility."""
        n = len(lo)
        blocks = []
        if self.A_eq is not None:
            blocks.append((self.A_eq, self.b_eq, True))
        if self.A_ub is not None:
            blocks.append((self.A_ub, self.b_ub, False))
        m = sum(A.shape[0] for A, _, _ in blocks)
        if m == 0:
            return 0.0
        # A x + p - q (=|<=) b with p, q >= 0; minimize sum(p + q)
        A_eq_rows, b_eq, A_ub_rows, b_ub = [], [], [], []
        offset = 0
        for A, b, is_eq in blocks:
            k = A.shape[0]
            extra = np.zeros((k, 2 * m))
            extra[np.arange(k), offset + np.arange(k)] = 1.0
            extra[np.arange(k), m + offset + np.arange(k)] = -1.0
            row = np.hstack([A, extra])
            (A_eq_rows if is_eq else A_ub_rows).append(row)
            (b_eq if is_eq else b_ub).append(b)
            offset += k
        c = np.concatenate([np.zeros(n), np.ones(2 * m)])
        bounds = list(zip(lo.tolist(), hi.tolist())) + [(0, None)] * (2 * m)
        res = linprog(
            c,
            A_ub=np.vstack(A_ub_rows) if A_ub_rows else None,
            b_ub=np.concatenate(b_ub) if b_ub else None,
            A_eq=np.vstack(A_eq_rows) if A_eq_rows else None,
            b_eq=np.concatenate(b_eq) if b_eq else None,
            bounds=bounds,
            method="highs",
        )
        if res.status != 0:
            return 0.0
        return float(res.fun)


def _is_integral(value) -> bool:
    if isinstance(value, Fraction):
        return value.denominator == 1
    return abs(value - round(value)) <= INTEGRALITY_TOL


def _box_volume(lo: np.ndarray, hi: np.ndarray, cap: int) -> int:
    """Integer points in the box, counted up to just past `cap`."""
    volume = 1
    for l, h in zip(lo.tolist(), hi.tolist()):
        volume *= h - l + 1
        if volume > cap:
            return cap + 1
    return volume


def _fractionality(value) -> float:
    f = float(value - math.floor(value))
    return min(f, 1.0 - f)


# ---------------------------------------------------------------------------
# Branch and bound
# ---------------------------------------------------------------------------

def solve(ip: IntegerProgram, limits: Optional[SolveLimits] = None) -> Solution:
    """
    Branch-and-bound over the integer counts.

    Depth-first, up-branch first, branching on the most fractional variable
    (lowest index on ties). Programs with at most `exact_lp_threshold`
    variables are bounded with the exact rational simplex; larger ones use
    HiGHS with a safety margin, and a float "infeasible" is only trusted once
    an elastic relaxation confirms a violation above that margin. Boxes with
    at most `leaf_size` integer points are enumerated instead of relaxed.

    Without a cost vector the first integer-feasible point is returned as OPTIMAL.

    Returns:
        OPTIMAL or INFEASIBLE when the search completes; FEASIBLE (incumbent
        found) or BOUND_REACHED (nothing found) when a limit stops it.
    """
    limits = limits or SolveLimits()
    start = time.perf_counter()
    relaxation = _Relaxation(ip, limits)
    n = ip.n_variables
    primary = ip.primary_count
    excluded = set(ip.exclusions)
    feasibility_only = ip.cost is None

    best_values: Optional[Tuple[int, ...]] = None
    best_value = math.inf
    nodes = 0
    stack = [(np.zeros(n, dtype=np.int64), np.array(ip.upper, dtype=np.int64))]
    limit_hit = False

    def bound_prunes(bound) -> bool:
        if best_values is None or bound is None:
            return False
        b = float(bound)
        if relaxation.integer_cost:
            b = math.ceil(b - 1e-9)
        return b >= best_value - 1e-9

    while stack:
        if nodes >= limits.node_limit or (
            limits.time_limit is not None and time.perf_counter() - start > limits.time_limit
        ):
            limit_hit = True
            break
        lo, hi = stack.pop()
        nodes += 1
        if _box_volume(lo, hi, limits.leaf_size) <= limits.leaf_size:
            found = False
            for point in product(*(range(int(l), int(h) + 1) for l, h in zip(lo, hi))):
                if point[:primary] in excluded or not ip.satisfies(point):
                    continue
                value = ip.objective(point)
                if best_values is None or value < best_value - 1e-9:
                    best_values, best_value = point, value
                    found = True
                    if feasibility_only:
                        break
            if found and feasibility_only:
                break
            continue
        state, x, bound = relaxation.solve(lo, hi)
        if state == "infeasible":
            continue
        if state == "optimal" and bound_prunes(bound):
            continue

        if state == "unknown":
            # no usable relaxation: split the first free variable at its midpoint
            free = next((j for j in range(n) if lo[j] < hi[j]), None)
            if free is None:
                candidate = tuple(int(v) for v in lo)
                if ip.is_feasible(candidate):
                    value = ip.objective(candidate)
                    if value < best_value - 1e-9 or best_values is None:
                        best_values, best_value = candidate, value
                        if feasibility_only:
                            break
                continue
            mid = (lo[free] + hi[free]) // 2
            down_hi = hi.copy()
            down_hi[free] = mid
            up_lo = lo.copy()
            up_lo[free] = mid + 1
            stack.append((lo, down_hi))
            stack.append((up_lo, hi))
            continue

        fractional = [j for j in range(n) if not _is_integral(x[j])]
        if fractional:
            j = max(fractional, key=lambda k: (_fractionality(x[k]), -k))
            floor = math.floor(x[j])
            down_hi = hi.copy()
            down_hi[j] = floor
            up_lo = lo.copy()
            up_lo[j] = floor + 1
            stack.append((lo, down_hi))
            stack.append((up_lo, hi))
            continue

        candidate = tuple(int(round(float(v))) for v in x)
        candidate = tuple(min(max(v, int(l)), int(h)) for v, l, h in zip(candidate, lo, hi))
        if tuple(candidate[:primary]) in excluded:
            free = next((j for j in range(primary) if lo[j] < hi[j]), None)
            if free is None:
                continue
            v = candidate[free]
            for new_lo, new_hi in ((v + 1, hi[free]), (v, v), (lo[free], v - 1))[::-1]:
                if new_lo <= new_hi:
                    child_lo, child_hi = lo.copy(), hi.copy()
                    child_lo[free], child_hi[free] = new_lo, new_hi
                    stack.append((child_lo, child_hi))
            continue
        if not ip.is_feasible(candidate):
            # rounding drifted off the feasible set; split on a free variable
            free = next((j for j in range(n) if lo[j] < hi[j]), None)
            if free is None:
                continue
            v = min(max(candidate[free], int(lo[free])), int(hi[free]) - 1)
            down_hi = hi.copy()
            down_hi[free] = v
            up_lo = lo.copy()
            up_lo[free] = v + 1
            stack.append((lo, down_hi))
            stack.append((up_lo, hi))
            continue

        value = ip.objective(candidate)
        if best_values is None or value < best_value - 1e-9:
            best_values, best_value = candidate, value
            if feasibility_only:
                break

    seconds = time.perf_counter() - start
    if limit_hit:
        status = SolveStatus.FEASIBLE if best_values is not None else SolveStatus.BOUND_REACHED
    else:
        status = SolveStatus.OPTIMAL if best_values is not None else SolveStatus.INFEASIBLE
    logger.debug(f"Solved {n}-variable program: {status.value} after {nodes} nodes in {seconds:.3f}s")
    return Solution(
        status=status,
        values=best_values,
        objective_value=best_value if best_values is not None else None,
        labels=ip.labels,
        nodes=nodes,
        seconds=seconds,
    )


def iter_top(ip: IntegerProgram, limits: Optional[SolveLimits] = None,
             node_budget: Optional[int] = None) -> Iterator[Solution]:
    """Successive optima, each re-solved with an exclusion cut on every earlier count vector.

    Stops after an INFEASIBLE re-solve; a limit-stopped solve yields its
    FEASIBLE incumbent (if any) and ends the sequence.
    """
    limits = limits or SolveLimits()
    excluded = list(ip.exclusions)
    remaining = node_budget
    while True:
        step_limits = limits
        if remaining is not None:
            if remaining <= 0:
                yield Solution(status=SolveStatus.BOUND_REACHED, labels=ip.labels)
                return
            step_limits = limits.model_copy(update={"node_limit": min(limits.node_limit, remaining)})
        solution = solve(ip.with_exclusions(excluded), step_limits)
        if remaining is not None:
            remaining -= solution.nodes
        yield solution
        if solution.status != SolveStatus.OPTIMAL:
            return
        excluded.append(tuple(solution.values[:ip.primary_count]))


def enumerate_top(ip: IntegerProgram, t: int, limits: Optional[SolveLimits] = None,
                  node_budget: Optional[int] = None) -> Enumeration:
    """Up to t solutions in non-decreasing objective order."""
    if t < 1:
        raise SolverError(f"t must be positive, got {t}")
    if ip.cost is None:
        raise SolverError("enumerating top solutions needs an objective")
    solutions: List[Solution] = []
    truncated = False
    nodes = 0
    for solution in iter_top(ip, limits, node_budget):
        nodes += solution.nodes
        if solution.status == SolveStatus.OPTIMAL:
            solutions.append(solution)
            if len(solutions) == t:
                break
            continue
        if solution.status == SolveStatus.INFEASIBLE:
            break
        truncated = True
        if solution.status == SolveStatus.FEASIBLE:
            solutions.append(solution)
        break
    if truncated:
        logger.info(f"Top-{t} enumeration truncated after {len(solutions)} solutions ({nodes} nodes)")
    return Enumeration(solutions=solutions, truncated=truncated, nodes=nodes)


def maximize_l1(
    ip: IntegerProgram,
    reference: Sequence[int],
    projection: Callable[[Any], Any],
    subset_filter: Callable[[Any], bool] = lambda label: True,
    limits: Optional[SolveLimits] = None,
) -> Tuple[int, bool]:
    """
    Largest L1 distance between the projected histogram of `reference` and that
    of any feasible point of `ip`.

    Each projected cell c gets h_c - u_c + v_c = r_c with u_c <= (H_c - r_c) z_c
    and v_c <= r_c (1 - z_c), z_c binary, so exactly one side can move.

    Returns:
        (value, exact): exact is False when a limit stopped the search; the
        value is then a lower bound.
    """
    if not ip.is_feasible(reference):
        raise SolverError("reference is not feasible for the program")
    cells: Dict[Any, List[int]] = {}
    for j, label in enumerate(ip.labels[:ip.primary_count]):
        if subset_filter(label):
            cells.setdefault(projection(label), []).append(j)

    n = ip.n_variables
    labels = list(ip.labels)
    upper = list(ip.upper)
    constraints = list(ip.constraints)
    cost = [0] * n
    for cell, members in cells.items():
        capacity = sum(ip.upper[j] for j in members)
        r = sum(reference[j] for j in members)
        if capacity == 0:
            continue
        u, v, z = len(labels), len(labels) + 1, len(labels) + 2
        labels += [("u", cell), ("v", cell), ("z", cell)]
        upper += [capacity - r, r, 1]
        cost += [-1, -1, 0]
        coefficients = {j: 1 for j in members}
        coefficients.update({u: -1, v: 1})
        constraints.append(LinearConstraintRow(coefficients=coefficients, sense="EQ", rhs=r, name=f"dev{cell}"))
        constraints.append(LinearConstraintRow(coefficients={u: 1, z: -(capacity - r)}, sense="LE", rhs=0))
        constraints.append(LinearConstraintRow(coefficients={v: 1, z: r}, sense="LE", rhs=r))

    if len(labels) == n:
        return 0, True
    extended = IntegerProgram(
        labels=tuple(labels), upper=tuple(upper), constraints=tuple(constraints), cost=tuple(cost),
        exclusions=ip.exclusions, n_primary=ip.primary_count,
    )
    solution = solve(extended, limits)
    if solution.status == SolveStatus.OPTIMAL:
        return int(round(-solution.objective_value)), True
    if solution.status == SolveStatus.FEASIBLE:
        return int(round(-solution.objective_value)), False
    if solution.status == SolveStatus.INFEASIBLE:
        raise SolverError("program became infeasible although the reference satisfies it")
    # BOUND_REACHED: the reference itself is at distance 0
    return 0, False


# ---------------------------------------------------------------------------
# Export and external backend
# ---------------------------------------------------------------------------

def _lp_term(coefficient: float, name: str) -> str:
    sign = "-" if coefficient < 0 else "+"
    return f"{sign} {abs(coefficient):.17g} {name}"


def to_lp_format(ip: IntegerProgram) -> str:
    """CPLEX LP text of the program (variables x0..x{n-1}); exclusion cuts are listed as comments."""
    names = [f"x{j}" for j in range(ip.n_variables)]
    lines = [f"\\ {ip.n_variables} variables, {len(ip.constraints)} constraints"]
    for vector in ip.exclusions:
        lines.append(f"\\ excluded: {' '.join(str(v) for v in vector)}")
    lines.append("Minimize")
    if ip.cost is not None and any(c != 0 for c in ip.cost):
        terms = " ".join(_lp_term(c, names[j]) for j, c in enumerate(ip.cost) if c != 0)
    else:
        terms = "0 x0" if names else ""
    lines.append(f" obj: {terms}")
    lines.append("Subject To")
    operator = {"EQ": "=", "GE": ">=", "LE": "<="}
    for i, row in enumerate(ip.constraints):
        terms = " ".join(_lp_term(a, names[j]) for j, a in sorted(row.coefficients.items())) or "0 x0"
        lines.append(f" c{i}: {terms} {operator[row.sense]} {row.rhs}")
    lines.append("Bounds")
    for j, u in enumerate(ip.upper):
        lines.append(f" 0 <= {names[j]} <= {u}")
    lines.append("Generals")
    lines.append(" " + " ".join(names))
    lines.append("End")
    return "\n".join(lines) + "\n"


def solve_milp(ip: IntegerProgram, time_limit: Optional[float] = None) -> Solution:
    """Cross-check backend on scipy's HiGHS MILP; programs with exclusion cuts are rejected."""
    if ip.exclusions:
        raise SolverError("the external backend cannot express exclusion cuts")
    n = ip.n_variables
    start = time.perf_counter()
    c = np.array(ip.cost if ip.cost is not None else [0.0] * n, dtype=float)
    constraints = []
    if ip.constraints:
        A = np.zeros((len(ip.constraints), n))
        lb = np.full(len(ip.constraints), -np.inf)
        ub = np.full(len(ip.constraints), np.inf)
        for i, row in enumerate(ip.constraints):
            for j, a in row.coefficients.items():
                A[i, j] = a
            if row.sense in ("EQ", "GE"):
                lb[i] = row.rhs
            if row.sense in ("EQ", "LE"):
                ub[i] = row.rhs
        constraints.append(LinearConstraint(A, lb, ub))
    options = {"time_limit": time_limit} if time_limit is not None else {}
    res = milp(c, integrality=np.ones(n), bounds=Bounds(np.zeros(n), np.array(ip.upper, dtype=float)),
               constraints=constraints, options=options)
    seconds = time.perf_counter() - start
    values = tuple(int(round(v)) for v in res.x) if res.x is not None else None
    if res.status == 0:
        status = SolveStatus.OPTIMAL
    elif res.status == 2:
        status = SolveStatus.INFEASIBLE
    else:
        status = SolveStatus.FEASIBLE if values is not None else SolveStatus.BOUND_REACHED
    return Solution(
        status=status,
        values=values,
        objective_value=ip.objective(values) if values is not None else None,
        labels=ip.labels,
        seconds=seconds,
    )
