"""Monte Carlo studies: data generators, median squared error, replication driver.

Every random draw flows from one study seed: replication r uses the stream
seeded by ``SeedSequence([seed, r])``, so results do not depend on execution
order or thread count.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm, t as student_t

from .estimator import (
    CoefficientSheet,
    QuantileGrid,
    first_stage_iv,
    fit_rq,
    tune,
)
from .spatial import SqarDataset, build_block_weight_matrix, reduced_form_response

DEFAULT_TAUS = tuple(np.linspace(0.1, 0.9, 9))

STUDY_METHODS = ("RQ", "FL", "FAL", "FS", "FAS")


def _resolve_threads(threads: int | None = None) -> int:
    cap = os.environ.get("SQAR_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    if threads is None:
        threads = cap
    return max(1, min(int(threads), cap))


@dataclass(frozen=True)
class SimDesign:
    """Configuration of one synthetic study.

    ``example`` selects the generator family: 1 fully parametric univariate,
    2 the same with t(3) coefficient spacing, 3 a piecewise-constant slope
    with fixed spatial lag, 4 bivariate predictors.  The varying factors
    b, c0, c1, c2 scale how strongly intercept, spatial lag, and slopes move
    across quantile levels.
    """

    example: int
    m1: int
    m2: int
    lam: float
    alpha: float = 3.0
    beta: tuple = (3.0,)
    b: float = 0.5
    c0: float = 0.0
    c1: float = 0.0
    c2: float = 0.0
    fn: str = "standard_normal"
    taus: tuple = DEFAULT_TAUS
    reps: int = 100
    seed: int = 0
    noise_scale: float = 1.0
    n: int | None = None

    def __post_init__(self):
        if self.example not in (1, 2, 3, 4):
            raise ValueError(f"example must be 1..4, got {self.example}")
        if self.m1 < 1 or self.m2 < 2:
            raise ValueError("need m1 >= 1 and m2 >= 2")
        if self.n is None:
            object.__setattr__(self, "n", self.m1 * self.m2)
        elif self.n != self.m1 * self.m2:
            raise ValueError(f"n={self.n} inconsistent with m1*m2={self.m1 * self.m2}")
        if abs(self.lam) >= 1.0:
            raise ValueError("|lambda| must be < 1")
        beta = tuple(float(v) for v in np.atleast_1d(self.beta))
        object.__setattr__(self, "beta", beta)
        if self.example == 4 and len(beta) != 2:
            raise ValueError("example 4 needs two predictor slopes")
        if self.example != 4 and len(beta) != 1:
            raise ValueError(f"example {self.example} needs one predictor slope")
        if self.fn not in ("standard_normal", "student_t3"):
            raise ValueError(f"unknown coefficient distribution {self.fn!r}")
        if self.noise_scale < 0.0:
            raise ValueError("noise_scale must be nonnegative")
        object.__setattr__(self, "taus", tuple(float(t) for t in self.taus))
        QuantileGrid(np.asarray(self.taus))  # validates ordering and range

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def grid(self) -> QuantileGrid:
        return QuantileGrid(np.asarray(self.taus))


def quantile_function(design: SimDesign):
    """Inverse CDF used to spread coefficients across quantile levels."""
    if design.fn == "standard_normal":
        return norm.ppf
    return lambda q: student_t.ppf(q, df=3)


def true_coefficients(design: SimDesign, tau: float):
    """True (alpha, lambda, beta) at one quantile level of the grid."""
    taus = np.asarray(design.taus)
    if not np.any(np.isclose(taus, tau, rtol=0.0, atol=1e-12)):
        raise ValueError(f"tau={tau} is not on the design grid")
    z = float(quantile_function(design)(tau))
    alpha_t = design.alpha + design.b * z
    if design.example in (1, 2):
        return alpha_t, design.lam + design.c0 * z, np.array([design.beta[0] + design.c1 * z])
    if design.example == 3:
        beta_t = design.beta[0] + design.c1 * z if tau < 0.49 else design.beta[0]
        return alpha_t, design.lam, np.array([beta_t])
    lam_t = design.lam + design.c0 * z
    beta_t = np.array([design.beta[0] + design.c1 * z, design.beta[1] + design.c2 * z])
    return alpha_t, lam_t, beta_t


def true_sheet(design: SimDesign) -> CoefficientSheet:
    """True coefficient sheet over the full quantile grid."""
    rows = [true_coefficients(design, tau) for tau in design.taus]
    return CoefficientSheet(alpha=[r[0] for r in rows], lam=[r[1] for r in rows],
                            beta=np.vstack([r[2] for r in rows]))


def generate(design: SimDesign, rep_seed: int):
    """One synthetic dataset plus its true coefficient sheet.

    Each observation draws its own quantile level from the grid, then the
    response solves the simultaneous system with the per-observation spatial
    lags on the block weight matrix.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(design.seed), int(rep_seed)]))
    n, p = design.n, design.p
    taus = np.asarray(design.taus)
    tau_idx = rng.integers(0, len(taus), size=n)
    x = rng.uniform(size=(n, p))
    eps = design.noise_scale * rng.standard_normal(n)

    per_level = [true_coefficients(design, tau) for tau in taus]
    alpha_i = np.array([per_level[i][0] for i in tau_idx])
    lam_i = np.array([per_level[i][1] for i in tau_idx])
    beta_i = np.vstack([per_level[i][2] for i in tau_idx])

    w = build_block_weight_matrix(design.m1, design.m2)
    y = reduced_form_response(alpha_i, lam_i, np.sum(x * beta_i, axis=1), eps, w)
    return SqarDataset(y=y, x=x, weights=w), true_sheet(design)


@dataclass(frozen=True)
class MedseTable:
    """Median squared coefficient error per method and quantile level."""

    taus: np.ndarray
    medse: dict
    reps_used: dict
    coef_paths: dict = field(default_factory=dict)

    def rows(self):
        """Long-format rows (method, tau, medse, reps_used)."""
        for method in self.medse:
            for tau, value in zip(self.taus, self.medse[method]):
                yield method, float(tau), float(value), int(self.reps_used[method])


def _fit_for_method(method, data, grid, criterion, fs, rq):
    if method == "RQ":
        return rq
    return tune(data, grid, method, criterion=criterion, first_stage=fs,
                initial=None if method in ("FL", "FS") else rq.sheet)


def run_study(design: SimDesign, methods, criterion: str = "BIC",
              rep_seeds=None, threads: int | None = None,
              intercept_in_error: bool = False) -> MedseTable:
    """Replicate generate-and-fit and reduce to a MedSE table.

    Penalized methods are tuned by ``criterion`` on each replication.  A
    replication is excluded for a method when its solver fails; the study
    aborts if more than 10% of replications fail for any method.

    The squared error covers the slope coefficients (spatial lag and
    predictor slopes).  The intercept estimate inherits the spatial-lag
    noise scaled by the response mean, which swamps every other term at
    these sample sizes; set ``intercept_in_error=True`` to include it
    anyway.
    """
    methods = [m.upper() for m in methods]
    for m in methods:
        if m not in STUDY_METHODS:
            raise ValueError(f"unknown method {m!r}; choose from {STUDY_METHODS}")
    if design.reps < 2:
        raise ValueError("need at least 2 replications")
    if rep_seeds is None:
        rep_seeds = list(range(design.reps))
    elif len(rep_seeds) != design.reps:
        raise ValueError("rep_seeds length must equal the replication count")

    grid = design.grid
    k, p = grid.k, design.p
    need_rq = "RQ" in methods or any(m in ("FAL", "FAS") for m in methods)

    def one_rep(r):
        data, truth = generate(design, rep_seeds[r])
        errors = {}
        coefs = {}
        try:
            fs = first_stage_iv(data, grid)
            rq = fit_rq(data, grid, first_stage=fs) if need_rq else None
        except Exception:
            for method in methods:
                errors[method] = np.full(k, np.nan)
                coefs[method] = np.full((k, p + 2), np.nan)
            return errors, coefs
        for method in methods:
            try:
                fit = _fit_for_method(method, data, grid, criterion, fs, rq)
            except Exception:
                errors[method] = np.full(k, np.nan)
                coefs[method] = np.full((k, p + 2), np.nan)
                continue
            if intercept_in_error:
                dev = np.column_stack([fit.sheet.alpha - truth.alpha,
                                       fit.sheet.slope_table() - truth.slope_table()])
            else:
                dev = fit.sheet.slope_table() - truth.slope_table()
            errors[method] = np.sum(dev ** 2, axis=1)
            coefs[method] = np.column_stack([fit.sheet.alpha, fit.sheet.lam, fit.sheet.beta])
        return errors, coefs

    results = _map_reps(one_rep, design.reps, _resolve_threads(threads))

    medse, reps_used, paths = {}, {}, {}
    for method in methods:
        errs = np.vstack([res[0][method] for res in results])
        ok = ~np.isnan(errs[:, 0])
        n_fail = int(np.sum(~ok))
        if n_fail > 0.1 * design.reps:
            raise RuntimeError(f"{n_fail} of {design.reps} replications failed for {method}")
        medse[method] = np.median(errs[ok], axis=0)
        reps_used[method] = int(np.sum(ok))
        coef_stack = np.stack([res[1][method] for res in results])[ok]
        paths[method] = np.median(coef_stack, axis=0)
    return MedseTable(taus=np.asarray(design.taus), medse=medse,
                      reps_used=reps_used, coef_paths=paths)


def _map_reps(fn, n_items: int, threads: int):
    if threads <= 1:
        return [fn(i) for i in range(n_items)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_items)))
