"""Bounded-variable primal simplex for node LP relaxations.

Solves ``min c.x  s.t.  A x <= b,  l <= x <= u`` where individual bounds
may be infinite.  Slack variables turn rows into equalities; a Phase-1
pass with artificial columns finds a feasible basis when the all-slack
basis is not.  Nonbasic variables sit at a finite bound (free variables
sit at zero), and an iteration either pivots a column into the basis or
flips a variable between its bounds.

Pricing is Dantzig (most negative reduced-cost violation) with a switch
to Bland's rule after a run of degenerate steps, which guarantees
termination.  The basis inverse is kept densely and refactorised from
scratch every ``REFACTOR_EVERY`` pivots to bound drift; problem sizes here
are a few hundred rows, where dense algebra is both fast and predictable.

The reported ``iterations`` count is the number of pivots plus bound
flips across both phases.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "LpStatus",
    "Basis",
    "LpSolution",
    "LpProblem",
    "solve_lp",
    "tighten_bound",
    "BASIC",
    "AT_LOWER",
    "AT_UPPER",
    "FREE_NONBASIC",
]

FEAS_TOL = 1e-7
PIVOT_TOL = 1e-9
ZERO_TOL = 1e-11
REFACTOR_EVERY = 50

BASIC, AT_LOWER, AT_UPPER, FREE_NONBASIC = 0, 1, 2, 3


class LpStatus(Enum):
    OPTIMAL = "optimal"
    INFEASIBLE = "infeasible"
    UNBOUNDED = "unbounded"
    UNSTABLE = "numerically unstable"


@dataclass(frozen=True)
class Basis:
    """Column statuses for the n structural variables and m slack rows."""

    var_status: np.ndarray  # (n,) ints in {BASIC, AT_LOWER, AT_UPPER, FREE_NONBASIC}
    row_status: np.ndarray  # (m,) same encoding for slack columns


@dataclass(frozen=True)
class LpSolution:
    status: LpStatus
    values: np.ndarray
    objective_value: float
    iterations: int
    reduced_costs: np.ndarray
    duals: np.ndarray
    basis: Basis | None

    @property
    def is_optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


class LpProblem:
    """A view over an instance's LP relaxation with per-node bound overrides.

    Branching only ever tightens bounds, so child problems share the
    instance's constraint data and carry their own bound vectors.
    """

    def __init__(self, instance, lower=None, upper=None):
        self.instance = instance
        self.lower = np.array(instance.lower if lower is None else lower, dtype=np.float64)
        self.upper = np.array(instance.upper if upper is None else upper, dtype=np.float64)

    @property
    def infeasible_by_bounds(self) -> bool:
        return bool(np.any(self.lower > self.upper + ZERO_TOL))

    def child(self, var: int, lower: float | None = None, upper: float | None = None) -> "LpProblem":
        lo = self.lower.copy()
        up = self.upper.copy()
        if lower is not None:
            lo[var] = max(lo[var], lower)
        if upper is not None:
            up[var] = min(up[var], upper)
        return LpProblem(self.instance, lo, up)


def tighten_bound(problem: LpProblem, var: int, side: str, value: float) -> LpProblem:
    """Child problem with the floor/ceil bound of a fractional LP value.

    ``side`` is "down" (new upper bound ``floor(value)``) or "up" (new
    lower bound ``ceil(value)``).  A child whose bounds cross is returned
    as-is; callers detect it via ``infeasible_by_bounds``.
    """
    if side == "down":
        return problem.child(var, upper=float(np.floor(value)))
    if side == "up":
        return problem.child(var, lower=float(np.ceil(value)))
    raise ValueError(f"side must be 'down' or 'up', got {side!r}")


class _Worker:
    """One simplex run; all state lives here, nothing is shared."""

    def __init__(self, problem: LpProblem):
        inst = problem.instance
        self.n = inst.n_vars
        self.m = inst.n_rows
        A = inst.dense_matrix()
        # columns: structural | slack; artificials are appended on demand
        self.cols = np.hstack([A, np.eye(self.m)])
        self.b = inst.rhs.astype(np.float64)
        self.lb = np.concatenate([problem.lower, np.zeros(self.m)])
        self.ub = np.concatenate([problem.upper, np.full(self.m, np.inf)])
        self.cost = np.concatenate([inst.objective, np.zeros(self.m)])
        self.n_real = self.n + self.m
        self.art_cols: list[int] = []
        self.status = np.empty(self.n_real, dtype=np.int8)
        for j in range(self.n_real):
            if np.isfinite(self.lb[j]):
                self.status[j] = AT_LOWER
            elif np.isfinite(self.ub[j]):
                self.status[j] = AT_UPPER
            else:
                self.status[j] = FREE_NONBASIC
        self.basis = np.zeros(self.m, dtype=np.int64)
        self.basis_pos = {}
        self.x = np.zeros(self.n_real)
        self.B_inv = np.eye(self.m)
        self.iterations = 0
        self.pivots_since_refactor = 0
        self.degenerate_run = 0
        self.bland = False
        self.max_iterations = 200 * (self.m + self.n) + 20000

    # -- setup ---------------------------------------------------------------

    def default_nonbasic_status(self, j: int) -> np.int8:
        if np.isfinite(self.lb[j]):
            return AT_LOWER
        if np.isfinite(self.ub[j]):
            return AT_UPPER
        return FREE_NONBASIC

    def nonbasic_value(self, j: int) -> float:
        s = self.status[j]
        if s == AT_LOWER:
            return self.lb[j]
        if s == AT_UPPER:
            return self.ub[j]
        return 0.0

    def set_all_nonbasic_values(self) -> None:
        for j in range(self.cols.shape[1]):
            if self.status[j] != BASIC:
                self.x[j] = self.nonbasic_value(j)

    def install_basis(self, basic_cols: np.ndarray) -> bool:
        """Factorise the given basic columns; False if singular."""
        B = self.cols[:, basic_cols]
        try:
            self.B_inv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            return False
        if not np.all(np.isfinite(self.B_inv)):
            return False
        self.basis = np.asarray(basic_cols, dtype=np.int64).copy()
        self.basis_pos = {int(c): i for i, c in enumerate(self.basis)}
        return True

    def recompute_basics(self) -> None:
        rhs = self.b - self.cols @ self.x + self.cols[:, self.basis] @ self.x[self.basis]
        xb = self.B_inv @ rhs
        self.x[self.basis] = xb

    def refactor(self) -> bool:
        if not self.install_basis(self.basis):
            return False
        self.set_all_nonbasic_values()
        self.recompute_basics()
        self.pivots_since_refactor = 0
        return True

    # -- core iteration -------------------------------------------------------

    def reduced_costs(self, cost: np.ndarray) -> np.ndarray:
        y = cost[self.basis] @ self.B_inv
        return cost - y @ self.cols, y

    def choose_entering(self, d: np.ndarray, allowed: np.ndarray) -> tuple[int, int] | None:
        """Return (column, direction) or None at optimality.

        direction +1 increases the entering variable, -1 decreases it.
        """
        fixed = self.ub - self.lb <= ZERO_TOL
        stat = self.status
        up_ok = (stat == AT_LOWER) | (stat == FREE_NONBASIC)
        dn_ok = (stat == AT_UPPER) | (stat == FREE_NONBASIC)
        viol_up = np.where(allowed & up_ok & ~fixed, -d, 0.0)
        viol_dn = np.where(allowed & dn_ok & ~fixed, d, 0.0)
        viol = np.maximum(viol_up, viol_dn)
        if self.bland:
            idx = np.nonzero(viol > FEAS_TOL)[0]
            if idx.size == 0:
                return None
            j = int(idx[0])
        else:
            j = int(np.argmax(viol))
            if viol[j] <= FEAS_TOL:
                return None
        direction = 1 if viol_up[j] >= viol_dn[j] else -1
        return j, direction

    def ratio_test(self, j: int, direction: int, w: np.ndarray):
        """Max step for entering column j; returns (step, leaving_pos, to_upper).

        leaving_pos -1 encodes a bound flip of j itself; None step means
        the problem is unbounded in this direction.
        """
        step = np.inf
        leave = -1
        leave_abs_w = 0.0
        to_upper = False
        rng = self.ub[j] - self.lb[j]
        if np.isfinite(rng):
            step = rng
        delta = direction * w
        xb = self.x[self.basis]
        lo = self.lb[self.basis]
        hi = self.ub[self.basis]
        for i in range(self.m):
            di = delta[i]
            if di > PIVOT_TOL:
                if np.isfinite(lo[i]):
                    lim = (xb[i] - lo[i]) / di
                else:
                    continue
                hit_upper = False
            elif di < -PIVOT_TOL:
                if np.isfinite(hi[i]):
                    lim = (hi[i] - xb[i]) / (-di)
                else:
                    continue
                hit_upper = True
            else:
                continue
            lim = max(lim, 0.0)
            if lim < step - ZERO_TOL or (
                lim < step + ZERO_TOL and (leave < 0 or abs(w[i]) > leave_abs_w)
            ):
                if lim < step - ZERO_TOL or leave >= 0 or not np.isfinite(step) or lim <= step:
                    step = min(step, lim)
                    leave = i
                    leave_abs_w = abs(w[i])
                    to_upper = hit_upper
        if not np.isfinite(step):
            return None, -1, False
        if leave >= 0 and step >= (self.ub[j] - self.lb[j]) - ZERO_TOL and np.isfinite(
            self.ub[j] - self.lb[j]
        ):
            # bound flip dominates (never longer than the basic limit)
            if (self.ub[j] - self.lb[j]) <= step + ZERO_TOL:
                return self.ub[j] - self.lb[j], -1, False
        return step, leave, to_upper

    def iterate(self, cost: np.ndarray, allowed: np.ndarray) -> str:
        """Run pricing/ratio/pivot until optimal for ``cost``.

        Returns one of "optimal", "unbounded", "unstable".
        """
        while True:
            if self.iterations >= self.max_iterations:
                return "unstable"
            d, _ = self.reduced_costs(cost)
            pick = self.choose_entering(d, allowed)
            if pick is None:
                return "optimal"
            j, direction = pick
            w = self.B_inv @ self.cols[:, j]
            step, leave, to_upper = self.ratio_test(j, direction, w)
            if step is None:
                return "unbounded"
            self.iterations += 1
            if step <= ZERO_TOL:
                self.degenerate_run += 1
                if self.degenerate_run > 10 * (self.m + self.n):
                    self.bland = True
            else:
                self.degenerate_run = 0
            if leave < 0:
                # bound flip: j moves to its opposite bound, basis unchanged
                self.x[self.basis] -= direction * step * w
                self.x[j] += direction * step
                self.status[j] = AT_UPPER if direction > 0 else AT_LOWER
                continue
            pivot = w[leave]
            if abs(pivot) < PIVOT_TOL:
                if not self.refactor():
                    return "unstable"
                continue
            out_col = int(self.basis[leave])
            self.x[self.basis] -= direction * step * w
            new_val = self.x[j] + direction * step
            if to_upper:
                self.status[out_col] = AT_UPPER
                self.x[out_col] = self.ub[out_col]
            else:
                self.status[out_col] = AT_LOWER if np.isfinite(self.lb[out_col]) else FREE_NONBASIC
                self.x[out_col] = self.lb[out_col] if np.isfinite(self.lb[out_col]) else 0.0
            self.basis[leave] = j
            self.basis_pos.pop(out_col, None)
            self.basis_pos[j] = leave
            self.status[j] = BASIC
            self.x[j] = new_val
            # product-form update of the dense inverse
            row = self.B_inv[leave] / pivot
            w_rest = w.copy()
            w_rest[leave] = 0.0
            self.B_inv -= np.outer(w_rest, row)
            self.B_inv[leave] = row
            self.pivots_since_refactor += 1
            if self.pivots_since_refactor >= REFACTOR_EVERY:
                if not self.refactor():
                    return "unstable"

    # -- phases ----------------------------------------------------------------

    def phase1(self) -> str:
        self.set_all_nonbasic_values()
        s0 = self.b - self.cols[:, : self.n] @ self.x[: self.n]
        basic_cols = []
        for i in range(self.m):
            slack = self.n + i
            if s0[i] >= -FEAS_TOL:
                basic_cols.append(slack)
                self.x[slack] = s0[i]
                self.status[slack] = BASIC
            else:
                art = np.zeros((self.m, 1))
                art[i, 0] = -1.0
                self.cols = np.hstack([self.cols, art])
                col_idx = self.cols.shape[1] - 1
                self.art_cols.append(col_idx)
                self.lb = np.append(self.lb, 0.0)
                self.ub = np.append(self.ub, np.inf)
                self.status = np.append(self.status, BASIC)
                self.x = np.append(self.x, -s0[i])
                self.status[slack] = AT_LOWER
                self.x[slack] = 0.0
                basic_cols.append(col_idx)
        if not self.install_basis(np.array(basic_cols)):
            return "unstable"
        if not self.art_cols:
            return "optimal"
        cost1 = np.zeros(self.cols.shape[1])
        cost1[self.art_cols] = 1.0
        allowed = np.ones(self.cols.shape[1], dtype=bool)
        outcome = self.iterate(cost1, allowed)
        if outcome != "optimal":
            return outcome
        infeas = float(self.x[self.art_cols].sum())
        if infeas > 1e-6:
            return "infeasible"
        # drive any remaining artificials (at value ~0) out of the basis
        for pos in range(self.m):
            col = int(self.basis[pos])
            if col not in self.art_cols:
                continue
            row = self.B_inv[pos]
            replaced = False
            for cand in range(self.n_real):
                if self.status[cand] == BASIC:
                    continue
                w_val = row @ self.cols[:, cand]
                if abs(w_val) > 1e-7:
                    w = self.B_inv @ self.cols[:, cand]
                    old_status = self.status[cand]
                    self.basis[pos] = cand
                    self.basis_pos.pop(col, None)
                    self.basis_pos[cand] = pos
                    self.status[cand] = BASIC
                    self.status[col] = AT_LOWER
                    r = self.B_inv[pos] / w_val
                    w_rest = w.copy()
                    w_rest[pos] = 0.0
                    self.B_inv -= np.outer(w_rest, r)
                    self.B_inv[pos] = r
                    self.x[cand] = self.nonbasic_value(cand) if old_status != BASIC else self.x[cand]
                    replaced = True
                    break
            if not replaced:
                # slack columns make [A | I] full row rank, so this cannot
                # happen with a consistent inverse; treat as breakdown
                return "unstable"
        self.set_all_nonbasic_values()
        self.recompute_basics()
        return "optimal"

    def warm_start(self, basis: Basis) -> bool:
        """Adopt a previous basis when it is primal feasible here."""
        self.status[: self.n] = basis.var_status
        self.status[self.n : self.n_real] = basis.row_status
        basic_cols = np.nonzero(self.status == BASIC)[0]
        if basic_cols.size != self.m:
            return False
        # nonbasic statuses must point at finite bounds under the new box
        for j in range(self.n_real):
            s = self.status[j]
            if s == AT_LOWER and not np.isfinite(self.lb[j]):
                return False
            if s == AT_UPPER and not np.isfinite(self.ub[j]):
                return False
        if not self.install_basis(basic_cols):
            return False
        self.set_all_nonbasic_values()
        self.recompute_basics()
        xb = self.x[self.basis]
        lo = self.lb[self.basis]
        hi = self.ub[self.basis]
        if np.any(xb < lo - FEAS_TOL) or np.any(xb > hi + FEAS_TOL):
            return False
        self.x[self.basis] = np.clip(xb, np.where(np.isfinite(lo), lo, -np.inf), np.where(np.isfinite(hi), hi, np.inf))
        return True

    def phase2(self) -> str:
        cost2 = np.zeros(self.cols.shape[1])
        cost2[: self.n_real] = self.cost
        allowed = np.zeros(self.cols.shape[1], dtype=bool)
        allowed[: self.n_real] = True  # artificials never re-enter
        return self.iterate(cost2, allowed)

    def solution(self, status: LpStatus) -> LpSolution:
        if status is not LpStatus.OPTIMAL:
            return LpSolution(
                status=status,
                values=np.zeros(self.n),
                objective_value=np.nan,
                iterations=self.iterations,
                reduced_costs=np.zeros(self.n),
                duals=np.zeros(self.m),
                basis=None,
            )
        self.refactor()
        cost2 = np.zeros(self.cols.shape[1])
        cost2[: self.n_real] = self.cost
        d, y = self.reduced_costs(cost2)
        values = self.x[: self.n].copy()
        var_status = self.status[: self.n].copy()
        row_status = self.status[self.n : self.n_real].copy()
        return LpSolution(
            status=LpStatus.OPTIMAL,
            values=values,
            objective_value=float(self.cost[: self.n] @ values),
            iterations=self.iterations,
            reduced_costs=d[: self.n].copy(),
            duals=y.copy(),
            basis=Basis(var_status=var_status, row_status=row_status),
        )


def solve_lp(problem: LpProblem, warm_basis: Basis | None = None) -> LpSolution:
    """Solve one LP relaxation.

    Warm starts reuse a previous basis when it is still primal feasible
    under the node's bounds, which skips Phase 1; otherwise the solve
    falls back to a cold start.  Status, objective, and solution agree
    between the two paths to within the solver tolerances.
    """
    if problem.infeasible_by_bounds:
        return LpSolution(
            status=LpStatus.INFEASIBLE,
            values=np.zeros(problem.instance.n_vars),
            objective_value=np.nan,
            iterations=0,
            reduced_costs=np.zeros(problem.instance.n_vars),
            duals=np.zeros(problem.instance.n_rows),
            basis=None,
        )
    if warm_basis is not None:
        worker = _Worker(problem)
        if worker.warm_start(warm_basis):
            outcome = worker.phase2()
            if outcome == "optimal":
                return worker.solution(LpStatus.OPTIMAL)
            if outcome == "unbounded":
                return worker.solution(LpStatus.UNBOUNDED)
            # unstable warm path: retry cold below
    worker = _Worker(problem)
    outcome = worker.phase1()
    if outcome == "infeasible":
        return worker.solution(LpStatus.INFEASIBLE)
    if outcome == "unstable":
        return worker.solution(LpStatus.UNSTABLE)
    if outcome == "unbounded":  # cannot happen in phase 1; defensive
        return worker.solution(LpStatus.UNSTABLE)
    outcome = worker.phase2()
    if outcome == "optimal":
        return worker.solution(LpStatus.OPTIMAL)
    if outcome == "unbounded":
        return worker.solution(LpStatus.UNBOUNDED)
    return worker.solution(LpStatus.UNSTABLE)
