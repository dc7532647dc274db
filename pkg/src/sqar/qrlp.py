"""Exact minimization of stacked quantile check losses by linear programming.

Encoding
--------
Residuals split into nonnegative parts: Z theta + u_pos - u_neg = y with
objective sum_r tau_r * u_pos_r + (1 - tau_r) * u_neg_r.  A weighted-L1
budget splits each penalized coordinate into theta_pos - theta_neg and adds
one row sum_j w_j (theta_pos_j + theta_neg_j) <= t.  A group sup-norm budget
keeps coordinates free, introduces one bound variable M_l per group with
+-theta_j <= M_l for j in the group, and adds sum_l w_l M_l <= t.

The assembled LP is handed to HiGHS (scipy.optimize.linprog); the reported
duality gap is computed from the returned constraint marginals.  The
brute-force oracle below is deliberately independent of this encoding.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .exceptions import MaxIterations, TooLarge

_HIGHS_OPTIONS = {
    "primal_feasibility_tolerance": 1e-9,
    "dual_feasibility_tolerance": 1e-9,
}

# Enumeration bounds for the oracle: C(14, 3) systems is the worst case.
_ORACLE_MAX_ROWS = 14
_ORACLE_MAX_COLS = 3


def check_loss(tau: float, r: float) -> float:
    """Check loss tau*r for r > 0, (tau-1)*r for r <= 0."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    r = float(r)
    return tau * r if r > 0 else (tau - 1.0) * r


def check_loss_rows(tau: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vectorized check loss over per-row quantile levels."""
    tau = np.asarray(tau, dtype=float)
    r = np.asarray(r, dtype=float)
    return np.where(r > 0, tau * r, (tau - 1.0) * r)


@dataclass(frozen=True)
class CheckLossProblem:
    """Stacked quantile regression data: K contiguous blocks of n rows."""

    design: np.ndarray
    response: np.ndarray
    tau_of_row: np.ndarray

    def __post_init__(self):
        z = np.array(self.design, dtype=float, order="C")
        y = np.array(self.response, dtype=float).reshape(-1)
        tau = np.array(self.tau_of_row, dtype=float).reshape(-1)
        if z.ndim != 2:
            raise ValueError("design must be a 2-d matrix")
        if y.shape[0] != z.shape[0] or tau.shape[0] != z.shape[0]:
            raise ValueError("design, response and tau_of_row disagree on the row count")
        if np.any(tau <= 0.0) or np.any(tau >= 1.0):
            raise ValueError("all quantile levels must lie in (0, 1)")
        # each distinct tau must occupy one contiguous run of rows
        change = np.flatnonzero(np.diff(tau) != 0.0)
        starts = tau[np.concatenate(([0], change + 1))]
        if len(np.unique(starts)) != len(starts):
            raise ValueError("rows with equal tau must form one contiguous block")
        for a in (z, y, tau):
            a.setflags(write=False)
        object.__setattr__(self, "design", z)
        object.__setattr__(self, "response", y)
        object.__setattr__(self, "tau_of_row", tau)

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]

    @property
    def n_coef(self) -> int:
        return self.design.shape[1]

    def loss_at(self, theta: np.ndarray) -> float:
        """Total check loss at a coefficient vector."""
        resid = self.response - self.design @ np.asarray(theta, dtype=float)
        return float(np.sum(check_loss_rows(self.tau_of_row, resid)))


@dataclass(frozen=True)
class PenaltySpec:
    """Budget constraint on designated coordinates.

    ``penalized_indices`` holds (coordinate, weight) pairs for the
    weighted-L1 kind; ``groups`` holds (coordinate tuple, weight) pairs for
    the group sup-norm kind.  Intercept coordinates must never be listed.
    """

    kind: str = "none"
    penalized_indices: tuple = field(default_factory=tuple)
    groups: tuple = field(default_factory=tuple)
    budget: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "weighted_l1", "group_supnorm"):
            raise ValueError(f"unknown penalty kind {self.kind!r}")
        if self.kind != "none":
            if not np.isfinite(self.budget) or self.budget < 0.0:
                raise ValueError(f"budget must be finite and >= 0, got {self.budget}")
        if self.kind == "weighted_l1":
            idx = [j for j, _ in self.penalized_indices]
            if len(set(idx)) != len(idx):
                raise ValueError("penalized coordinate listed twice")
            self._check_weights(w for _, w in self.penalized_indices)
        if self.kind == "group_supnorm":
            seen: set[int] = set()
            for members, _ in self.groups:
                members = tuple(members)
                if seen.intersection(members):
                    raise ValueError("groups must be disjoint")
                seen.update(members)
            self._check_weights(w for _, w in self.groups)

    @staticmethod
    def _check_weights(weights) -> None:
        for w in weights:
            if not np.isfinite(w) or w <= 0.0:
                raise ValueError(f"penalty weights must be positive and finite, got {w}")

    @classmethod
    def none(cls) -> "PenaltySpec":
        return cls(kind="none")

    @classmethod
    def weighted_l1(cls, pairs, budget: float) -> "PenaltySpec":
        return cls(kind="weighted_l1",
                   penalized_indices=tuple((int(j), float(w)) for j, w in pairs),
                   budget=float(budget))

    @classmethod
    def group_supnorm(cls, groups, budget: float) -> "PenaltySpec":
        return cls(kind="group_supnorm",
                   groups=tuple((tuple(int(j) for j in members), float(w)) for members, w in groups),
                   budget=float(budget))


@dataclass(frozen=True)
class LpSolution:
    theta: np.ndarray
    objective: float
    duality_gap: float
    status: str


def _budget_usage(theta: np.ndarray, penalty: PenaltySpec) -> float:
    if penalty.kind == "weighted_l1":
        return float(sum(w * abs(theta[j]) for j, w in penalty.penalized_indices))
    if penalty.kind == "group_supnorm":
        return float(sum(w * np.max(np.abs(theta[list(members)])) for members, w in penalty.groups))
    return 0.0


def solve(problem: CheckLossProblem, penalty: PenaltySpec) -> LpSolution:
    """Minimize the stacked check loss, optionally under a fusion budget.

    Returns the minimizer together with the check loss evaluated at it and
    the LP duality gap.  ``status`` is ``"optimal"``, or ``"budget_inactive"``
    when a budget constraint was supplied but is slack at the optimum.
    """
    z, y, tau = problem.design, problem.response, problem.tau_of_row
    rows, q = z.shape
    if penalty.kind != "none":
        all_idx = ([j for j, _ in penalty.penalized_indices] if penalty.kind == "weighted_l1"
                   else [j for members, _ in penalty.groups for j in members])
        if any(j < 0 or j >= q for j in all_idx):
            raise ValueError("penalized coordinate index out of range")

    eye = sp.identity(rows, format="csc")
    resid_cost = np.concatenate([tau, 1.0 - tau])
    a_ub = None
    b_ub = None

    if penalty.kind == "weighted_l1":
        pen = np.array([j for j, _ in penalty.penalized_indices], dtype=int)
        wts = np.array([w for _, w in penalty.penalized_indices], dtype=float)
        free = np.setdiff1d(np.arange(q), pen)
        npen, nfree = len(pen), len(free)
        # variables: theta_free | theta_pos | theta_neg | u_pos | u_neg
        zf = sp.csc_matrix(z[:, free]) if nfree else sp.csc_matrix((rows, 0))
        zp = sp.csc_matrix(z[:, pen])
        a_eq = sp.hstack([zf, zp, -zp, eye, -eye], format="csc")
        cost = np.concatenate([np.zeros(nfree + 2 * npen), resid_cost])
        bounds = [(None, None)] * nfree + [(0, None)] * (2 * npen + 2 * rows)
        brow = np.concatenate([np.zeros(nfree), wts, wts, np.zeros(2 * rows)])
        a_ub = sp.csr_matrix(brow[None, :])
        b_ub = np.array([penalty.budget])

        def unpack(x):
            theta = np.empty(q)
            theta[free] = x[:nfree]
            theta[pen] = x[nfree:nfree + npen] - x[nfree + npen:nfree + 2 * npen]
            return theta

    elif penalty.kind == "group_supnorm":
        n_groups = len(penalty.groups)
        # variables: theta | M | u_pos | u_neg
        a_eq = sp.hstack(
            [sp.csc_matrix(z), sp.csc_matrix((rows, n_groups)), eye, -eye], format="csc")
        cost = np.concatenate([np.zeros(q + n_groups), resid_cost])
        bounds = [(None, None)] * q + [(0, None)] * (n_groups + 2 * rows)
        ub_rows = []
        for g, (members, _) in enumerate(penalty.groups):
            for j in members:
                row = np.zeros(q + n_groups + 2 * rows)
                row[j] = 1.0
                row[q + g] = -1.0
                ub_rows.append(row)
                row = row.copy()
                row[j] = -1.0
                ub_rows.append(row)
        brow = np.zeros(q + n_groups + 2 * rows)
        brow[q:q + n_groups] = [w for _, w in penalty.groups]
        ub_rows.append(brow)
        a_ub = sp.csr_matrix(np.array(ub_rows))
        b_ub = np.zeros(len(ub_rows))
        b_ub[-1] = penalty.budget

        def unpack(x):
            return x[:q].copy()

    else:
        a_eq = sp.hstack([sp.csc_matrix(z), eye, -eye], format="csc")
        cost = np.concatenate([np.zeros(q), resid_cost])
        bounds = [(None, None)] * q + [(0, None)] * (2 * rows)

        def unpack(x):
            return x[:q].copy()

    res = linprog(cost, A_ub=a_ub, b_ub=b_ub, A_eq=a_eq, b_eq=y,
                  bounds=bounds, method="highs", options=_HIGHS_OPTIONS)
    if res.status != 0:
        raise MaxIterations(f"LP solver did not reach optimality (status {res.status}: {res.message})")

    theta = unpack(res.x)
    objective = problem.loss_at(theta)
    # all finite variable bounds are zero, so the dual objective reduces to
    # the equality and inequality right-hand-side terms
    dual_obj = float(y @ res.eqlin.marginals)
    if a_ub is not None:
        dual_obj += float(b_ub @ res.ineqlin.marginals)
    gap = abs(float(res.fun) - dual_obj)

    status = "optimal"
    if penalty.kind != "none":
        if _budget_usage(theta, penalty) < penalty.budget - 1e-7 * (1.0 + penalty.budget):
            status = "budget_inactive"
    return LpSolution(theta=theta, objective=objective, duality_gap=gap, status=status)


def brute_force_oracle(problem: CheckLossProblem,
                       penalty: PenaltySpec | None = None) -> LpSolution:
    """Exhaustive minimizer for tiny unpenalized problems.

    An optimal check-loss solution interpolates as many observations as
    there are coefficients, so enumerating every exact-interpolation system
    (plus theta = 0) and scoring all candidates finds the optimum without
    touching any LP machinery.
    """
    if penalty is not None and penalty.kind != "none":
        raise ValueError("the enumeration oracle only handles unpenalized problems")
    z, y = problem.design, problem.response
    rows, q = z.shape
    if rows > _ORACLE_MAX_ROWS or q > _ORACLE_MAX_COLS:
        raise TooLarge(f"enumeration bounds exceeded: rows={rows} (max {_ORACLE_MAX_ROWS}), "
                       f"q={q} (max {_ORACLE_MAX_COLS})")

    candidates = [np.zeros(q)]
    for combo in itertools.combinations(range(rows), q):
        sub = z[list(combo)]
        try:
            theta = np.linalg.solve(sub, y[list(combo)])
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(theta)):
            candidates.append(theta)

    best_theta, best_obj = None, np.inf
    for theta in candidates:
        obj = problem.loss_at(theta)
        if obj < best_obj:
            best_theta, best_obj = theta, obj
    return LpSolution(theta=best_theta, objective=best_obj, duality_gap=0.0, status="optimal")
