"""
Exact two-phase simplex over Fractions.

Used to bound small integer programs without floating-point error: variables
are shifted by their lower bounds (x = x' + L), finite upper bounds become
<= rows, and Bland's rule guarantees termination on degenerate tableaus.
"""
import enum
from fractions import Fraction
from typing import List, Optional, Sequence

from pydantic import BaseModel, ConfigDict


class LPStatus(str, enum.Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"


class LPResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    status: LPStatus
    x: Optional[List[Fraction]] = None
    value: Optional[Fraction] = None
    pivots: int = 0


def _pivot(tableau: List[List[Fraction]], objective: List[Fraction], row: int, col: int) -> None:
    pivot_row = tableau[row]
    p = pivot_row[col]
    if p != 1:
        tableau[row] = pivot_row = [v / p for v in pivot_row]
    for i, other in enumerate(tableau):
        if i != row and other[col] != 0:
            f = other[col]
            tableau[i] = [a - f * b for a, b in zip(other, pivot_row)]
    f = objective[col]
    if f != 0:
        objective[:] = [a - f * b for a, b in zip(objective, pivot_row)]


def _run(tableau, objective, basis, allowed: Sequence[bool]) -> tuple:
    """Minimize with Bland's rule; `objective` holds reduced costs and -value in the last slot."""
    pivots = 0
    n_cols = len(objective) - 1
    while True:
        entering = next((j for j in range(n_cols) if allowed[j] and objective[j] < 0), None)
        if entering is None:
            return LPStatus.OPTIMAL, pivots
        leaving, best = None, None
        for i, row in enumerate(tableau):
            a = row[entering]
            if a > 0:
                ratio = row[-1] / a
                if best is None or ratio < best or (ratio == best and basis[i] < basis[leaving]):
                    leaving, best = i, ratio
        if leaving is None:
            return LPStatus.UNBOUNDED, pivots
        _pivot(tableau, objective, leaving, entering)
        basis[leaving] = entering
        pivots += 1


def _objective_row(cost: Sequence[Fraction], tableau, basis) -> List[Fraction]:
    row = list(cost) + [Fraction(0)]
    for i, b in enumerate(basis):
        cb = row[b] if b < len(cost) else Fraction(0)
        if cb != 0:
            row = [r - cb * t for r, t in zip(row, tableau[i])]
    return row


def solve_exact(
    c: Sequence,
    rows: Sequence[Sequence],
    senses: Sequence[str],
    rhs: Sequence,
    lower: Sequence,
    upper: Sequence,
) -> LPResult:
    """
    Minimize c.x subject to rows[i].x (senses[i]) rhs[i] and lower <= x <= upper.

    Args:
        c: objective coefficients (numbers convertible to Fraction)
        rows: dense constraint rows
        senses: "EQ", "GE" or "LE" per row
        rhs: right-hand sides
        lower: finite lower bounds
        upper: upper bounds (None for unbounded)

    Returns:
        LPResult with an exact optimum, or INFEASIBLE / UNBOUNDED.
    """
    n = len(c)
    lower = [Fraction(v) for v in lower]
    if any(u is not None and Fraction(u) < lo for u, lo in zip(upper, lower)):
        return LPResult(status=LPStatus.INFEASIBLE)

    # rows as (coefficients, sense, rhs) after the lower-bound shift
    constraints = []
    for row, sense, b in zip(rows, senses, rhs):
        coefficients = [Fraction(a) for a in row]
        shifted = Fraction(b) - sum(a * lo for a, lo in zip(coefficients, lower))
        constraints.append((coefficients, sense, shifted))
    for j, u in enumerate(upper):
        if u is not None:
            unit = [Fraction(0)] * n
            unit[j] = Fraction(1)
            constraints.append((unit, "LE", Fraction(u) - lower[j]))

    n_slack = sum(1 for _, sense, _ in constraints if sense != "EQ")
    m = len(constraints)
    n_total = n + n_slack + m  # structural, slack, artificial
    tableau = []
    basis = []
    slack = n
    for i, (coefficients, sense, b) in enumerate(constraints):
        row = coefficients + [Fraction(0)] * (n_slack + m) + [b]
        if sense == "LE":
            row[slack] = Fraction(1)
            slack += 1
        elif sense == "GE":
            row[slack] = Fraction(-1)
            slack += 1
        if row[-1] < 0:
            row = [-v for v in row]
        row[n + n_slack + i] = Fraction(1)
        tableau.append(row)
        basis.append(n + n_slack + i)

    if m == 0:
        if any(Fraction(v) < 0 for v in c):
            return LPResult(status=LPStatus.UNBOUNDED)
        x = list(lower)
        return LPResult(status=LPStatus.OPTIMAL, x=x, value=sum(Fraction(a) * v for a, v in zip(c, x)))

    # phase 1: minimize the sum of artificials
    phase1_cost = [Fraction(0)] * (n + n_slack) + [Fraction(1)] * m
    objective = _objective_row(phase1_cost, tableau, basis)
    _, pivots = _run(tableau, objective, basis, [True] * n_total)
    if -objective[-1] > 0:
        return LPResult(status=LPStatus.INFEASIBLE, pivots=pivots)

    # drive zero-level artificials out of the basis; drop redundant rows
    first_artificial = n + n_slack
    keep = []
    for i in range(len(tableau)):
        if basis[i] >= first_artificial:
            col = next((j for j in range(first_artificial) if tableau[i][j] != 0), None)
            if col is None:
                continue
            _pivot(tableau, objective, i, col)
            basis[i] = col
            pivots += 1
        keep.append(i)
    tableau = [tableau[i] for i in keep]
    basis = [basis[i] for i in keep]

    phase2_cost = [Fraction(v) for v in c] + [Fraction(0)] * (n_slack + m)
    objective = _objective_row(phase2_cost, tableau, basis)
    allowed = [j < first_artificial for j in range(n_total)]
    status, more = _run(tableau, objective, basis, allowed)
    pivots += more
    if status == LPStatus.UNBOUNDED:
        return LPResult(status=status, pivots=pivots)

    shifted = [Fraction(0)] * n_total
    for i, b in enumerate(basis):
        shifted[b] = tableau[i][-1]
    x = [shifted[j] + lower[j] for j in range(n)]
    value = sum(Fraction(a) * v for a, v in zip(c, x))
    return LPResult(status=LPStatus.OPTIMAL, x=x, value=value, pivots=pivots)
