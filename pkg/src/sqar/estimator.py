"""Two-stage instrumental-variable quantile estimation with fusion penalties.

The estimation pipeline: a first-stage quantile regression of the spatial lag
WY on the instruments [1, X, WX] yields quantile-specific fitted lags; the
second stage fits all quantile levels jointly on a stacked design whose
coordinates are interquantile slope differences, so that a weighted-L1 or a
group sup-norm budget on those differences shrinks neighboring quantile
slopes to exact equality.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

from . import qrlp
from .exceptions import DegenerateCovariance, InvalidBudget, RankDeficient
from .spatial import SqarDataset, estimate_noise_variance

#: differences below this magnitude count as fused (solver noise is ~1e-9)
FUSION_TOL = 1e-6

#: adaptive-weight denominators are clamped here before inversion
WEIGHT_CLAMP = 1e-8

FUSED_METHODS = ("FL", "FAL", "FS", "FAS")


@dataclass(frozen=True)
class QuantileGrid:
    """Strictly increasing quantile levels in (0, 1)."""

    taus: np.ndarray

    def __post_init__(self):
        taus = np.array(self.taus, dtype=float).reshape(-1)
        if taus.size == 0:
            raise ValueError("quantile grid is empty")
        if np.any(taus <= 0.0) or np.any(taus >= 1.0):
            raise ValueError("quantile levels must lie in (0, 1)")
        if np.any(np.diff(taus) <= 0.0):
            raise ValueError("quantile levels must be strictly increasing")
        taus.setflags(write=False)
        object.__setattr__(self, "taus", taus)

    @property
    def k(self) -> int:
        return self.taus.shape[0]


@dataclass(frozen=True)
class FirstStageResult:
    """First-stage coefficients and fitted spatial lags, one column per quantile."""

    pi: np.ndarray
    u_hat: np.ndarray


@dataclass(frozen=True)
class CoefficientSheet:
    """Per-quantile coefficients: intercept, spatial lag, and predictor slopes."""

    alpha: np.ndarray
    lam: np.ndarray
    beta: np.ndarray
    sigma2: np.ndarray | None = None

    def __post_init__(self):
        alpha = np.array(self.alpha, dtype=float).reshape(-1)
        lam = np.array(self.lam, dtype=float).reshape(-1)
        beta = np.array(self.beta, dtype=float, order="C")
        if beta.ndim == 1:
            beta = beta[:, None]
        k = alpha.shape[0]
        if lam.shape[0] != k or beta.shape[0] != k:
            raise ValueError("alpha, lam and beta disagree on the number of quantiles")
        if not (np.all(np.isfinite(alpha)) and np.all(np.isfinite(lam)) and np.all(np.isfinite(beta))):
            raise ValueError("coefficient sheet contains non-finite entries")
        if np.any(np.abs(lam) >= 1.0):
            warnings.warn("a fitted spatial lag has |lambda| >= 1; the reduced form may be unstable",
                          stacklevel=2)
        sigma2 = self.sigma2
        if sigma2 is not None:
            sigma2 = np.array(sigma2, dtype=float).reshape(-1)
            if sigma2.shape[0] != k:
                raise ValueError("sigma2 length does not match the number of quantiles")
            sigma2.setflags(write=False)
        for a in (alpha, lam, beta):
            a.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def k(self) -> int:
        return self.alpha.shape[0]

    @property
    def p(self) -> int:
        return self.beta.shape[1]

    def slope_table(self) -> np.ndarray:
        """(K, p+1) table with the spatial lag as column 0."""
        return np.column_stack([self.lam, self.beta])

    def diffs(self) -> np.ndarray:
        """(K-1, p+1) interquantile slope differences."""
        return np.diff(self.slope_table(), axis=0)

    def row(self, k: int) -> np.ndarray:
        """Coefficient vector (alpha, lam, beta...) at quantile index k."""
        return np.concatenate([[self.alpha[k], self.lam[k]], self.beta[k]])


@dataclass(frozen=True)
class ThetaVector:
    """Stacked parameter vector in one of the two difference layouts.

    The ``FAL`` layout is (intercepts, then per-quantile difference blocks);
    the ``FAS`` layout is (first-quantile slope levels, intercepts, then one
    difference block per slope column).  Both have length (p+2)K.
    """

    values: np.ndarray
    layout: str
    k: int
    p: int

    def __post_init__(self):
        if self.layout not in ("FAL", "FAS"):
            raise ValueError(f"unknown layout {self.layout!r}")
        values = np.array(self.values, dtype=float).reshape(-1)
        if values.shape[0] != (self.p + 2) * self.k:
            raise ValueError(f"layout needs length {(self.p + 2) * self.k}, got {values.shape[0]}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)


@dataclass(frozen=True)
class TuningTrace:
    grid: np.ndarray
    loss: np.ndarray
    edf: np.ndarray
    aic: np.ndarray
    bic: np.ndarray


@dataclass(frozen=True)
class FitResult:
    sheet: CoefficientSheet
    method: str
    fused_mask: np.ndarray
    chosen_t: float | None = None
    trace: TuningTrace | None = None


def build_instruments(data: SqarDataset) -> np.ndarray:
    """Instrument matrix [1, X, WX] of shape (n, 2p+1)."""
    return np.column_stack([np.ones(data.n), data.x, data.weights.values @ data.x])


def _ols(design: np.ndarray, response: np.ndarray, what: str) -> np.ndarray:
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficient(f"{what} design matrix is numerically rank deficient")
    coef, *_ = np.linalg.lstsq(design, response, rcond=None)
    return coef


def fit_sar_2sls(data: SqarDataset) -> CoefficientSheet:
    """Two-stage least squares for the mean spatial autoregression.

    Stage one regresses the spatial lag WY on the instruments; stage two
    regresses Y on the fitted lag and the predictors.
    """
    u = data.weights.values @ data.y
    v = build_instruments(data)
    pi = _ols(v, u, "first-stage")
    u_hat = v @ pi
    design = np.column_stack([np.ones(data.n), u_hat, data.x])
    coef = _ols(design, data.y, "second-stage")
    return CoefficientSheet(alpha=[coef[0]], lam=[coef[1]], beta=coef[2:][None, :])


def first_stage_iv(data: SqarDataset, grid: QuantileGrid) -> FirstStageResult:
    """Quantile regressions of the spatial lag WY on the instruments."""
    u = data.weights.values @ data.y
    v = build_instruments(data)
    pi = np.empty((v.shape[1], grid.k))
    for k, tau in enumerate(grid.taus):
        problem = qrlp.CheckLossProblem(v, u, np.full(data.n, tau))
        pi[:, k] = qrlp.solve(problem, qrlp.PenaltySpec.none()).theta
    return FirstStageResult(pi=pi, u_hat=v @ pi)


def _sigma2_column(sheet: CoefficientSheet, data: SqarDataset) -> np.ndarray:
    return np.array([
        estimate_noise_variance(sheet.alpha[k], sheet.lam[k], sheet.beta[k], data,
                                check_lambda=False)
        for k in range(sheet.k)
    ])


def _with_sigma2(sheet: CoefficientSheet, data: SqarDataset) -> CoefficientSheet:
    return CoefficientSheet(alpha=sheet.alpha, lam=sheet.lam, beta=sheet.beta,
                            sigma2=_sigma2_column(sheet, data))


def fused_mask_of(sheet: CoefficientSheet, tol: float = FUSION_TOL) -> np.ndarray:
    """(K-1, p+1) boolean mask of interquantile differences below tolerance."""
    return np.abs(sheet.diffs()) < tol


def fit_rq(data: SqarDataset, grid: QuantileGrid,
           first_stage: FirstStageResult | None = None) -> FitResult:
    """Per-quantile two-stage quantile regression, no fusion.

    Each quantile level is fit independently: Y on [1, fitted lag, X] under
    that level's check loss.
    """
    fs = first_stage if first_stage is not None else first_stage_iv(data, grid)
    coefs = np.empty((grid.k, data.p + 2))
    for k, tau in enumerate(grid.taus):
        design = np.column_stack([np.ones(data.n), fs.u_hat[:, k], data.x])
        problem = qrlp.CheckLossProblem(design, data.y, np.full(data.n, tau))
        coefs[k] = qrlp.solve(problem, qrlp.PenaltySpec.none()).theta
    sheet = CoefficientSheet(alpha=coefs[:, 0], lam=coefs[:, 1], beta=coefs[:, 2:])
    sheet = _with_sigma2(sheet, data)
    return FitResult(sheet=sheet, method="RQ", fused_mask=fused_mask_of(sheet))


# ---------------------------------------------------------------------------
# difference reparameterization


def theta_from_sheet(sheet: CoefficientSheet, layout: str) -> ThetaVector:
    """Map a coefficient sheet into the stacked difference parameterization."""
    slopes = sheet.slope_table()
    d = np.vstack([slopes[:1], np.diff(slopes, axis=0)])
    if layout == "FAL":
        values = np.concatenate([sheet.alpha, d.ravel()])
    elif layout == "FAS":
        values = np.concatenate([slopes[0], sheet.alpha, d[1:].T.ravel()])
    else:
        raise ValueError(f"unknown layout {layout!r}")
    return ThetaVector(values=values, layout=layout, k=sheet.k, p=sheet.p)


def sheet_from_theta(theta: ThetaVector) -> CoefficientSheet:
    """Inverse of :func:`theta_from_sheet`; exact by construction."""
    k, p, v = theta.k, theta.p, theta.values
    if theta.layout == "FAL":
        alpha = v[:k]
        d = v[k:].reshape(k, p + 1)
        slopes = np.cumsum(d, axis=0)
    else:
        levels = v[:p + 1]
        alpha = v[p + 1:p + 1 + k]
        diffs = v[p + 1 + k:].reshape(p + 1, k - 1).T if k > 1 else np.zeros((0, p + 1))
        slopes = np.vstack([levels, levels + np.cumsum(diffs, axis=0)])
    return CoefficientSheet(alpha=alpha, lam=slopes[:, 0], beta=slopes[:, 1:])


def build_joint_design(data: SqarDataset, grid: QuantileGrid, fs: FirstStageResult,
                       layout: str) -> qrlp.CheckLossProblem:
    """Stacked design whose rows reproduce alpha_k + lam_k*uhat + beta_k'x.

    Because the slope coordinates are interquantile differences, the row for
    quantile block k carries its regressors on every difference block up to k
    (cumulative-sum structure).
    """
    if layout not in ("FAL", "FAS"):
        raise ValueError(f"unknown layout {layout!r}")
    n, p, k_total = data.n, data.p, grid.k
    z = np.zeros((k_total * n, (p + 2) * k_total))
    for k in range(k_total):
        g = np.column_stack([fs.u_hat[:, k], data.x])
        rows = slice(k * n, (k + 1) * n)
        if layout == "FAL":
            z[rows, k] = 1.0
            for j in range(k + 1):
                z[rows, k_total + j * (p + 1): k_total + (j + 1) * (p + 1)] = g
        else:
            z[rows, :p + 1] = g
            z[rows, p + 1 + k] = 1.0
            for l in range(p + 1):
                start = (p + 1) + k_total + l * (k_total - 1)
                z[rows, start:start + k] = g[:, l:l + 1]
    return qrlp.CheckLossProblem(design=z, response=np.tile(data.y, k_total),
                                 tau_of_row=np.repeat(grid.taus, n))


def _fal_penalized_pairs(k_total: int, p: int, weights: np.ndarray):
    """Coordinate/weight pairs for the difference blocks of quantiles 2..K."""
    pairs = []
    for k in range(2, k_total + 1):
        for l in range(p + 1):
            pairs.append((k_total + (k - 1) * (p + 1) + l, weights[k - 2, l]))
    return pairs


def _fas_groups(k_total: int, p: int, weights: np.ndarray):
    """One coordinate group per slope column in the FAS layout."""
    groups = []
    for l in range(p + 1):
        start = (p + 1) + k_total + l * (k_total - 1)
        groups.append((tuple(range(start, start + k_total - 1)), weights[l]))
    return groups


def adaptive_weights_fal(initial: CoefficientSheet) -> np.ndarray:
    """(K-1, p+1) reciprocal-difference weights, clamped at 1e8."""
    return 1.0 / np.maximum(np.abs(initial.diffs()), WEIGHT_CLAMP)


def adaptive_weights_fas(initial: CoefficientSheet) -> np.ndarray:
    """(p+1,) reciprocal of each column's largest absolute difference."""
    return 1.0 / np.maximum(np.max(np.abs(initial.diffs()), axis=0), WEIGHT_CLAMP)


def budget_range(method: str, grid: QuantileGrid, p: int) -> float:
    """Natural upper bound of the fusion budget for a method family."""
    if method in ("FL", "FAL"):
        return float((grid.k - 1) * (p + 1))
    if method in ("FS", "FAS"):
        return float(p + 1)
    raise ValueError(f"no budget range for method {method!r}")


def _penalty_for(method: str, grid: QuantileGrid, p: int, weights: np.ndarray,
                 t: float) -> qrlp.PenaltySpec:
    if method in ("FL", "FAL"):
        return qrlp.PenaltySpec.weighted_l1(_fal_penalized_pairs(grid.k, p, weights), t)
    return qrlp.PenaltySpec.group_supnorm(_fas_groups(grid.k, p, weights), t)


def _fused_weights(method: str, grid: QuantileGrid, p: int,
                   initial: CoefficientSheet | None) -> np.ndarray:
    if method == "FL":
        return np.ones((grid.k - 1, p + 1))
    if method == "FS":
        return np.ones(p + 1)
    if initial is None:
        raise ValueError("adaptive methods need an initial sheet")
    return adaptive_weights_fal(initial) if method == "FAL" else adaptive_weights_fas(initial)


def _check_budget(method: str, t: float, t_max: float) -> float:
    t = float(t)
    if not np.isfinite(t) or t < 0.0 or t > t_max * (1.0 + 1e-12) + 1e-12:
        raise InvalidBudget(f"budget {t} outside [0, {t_max}] for method {method}")
    return min(t, t_max)


def fit_fused(data: SqarDataset, grid: QuantileGrid, method: str, t: float,
              first_stage: FirstStageResult | None = None,
              initial: CoefficientSheet | None = None) -> FitResult:
    """Joint multi-quantile fit under a fusion budget.

    Parameters
    ----------
    method : {"FL", "FAL", "FS", "FAS"}
        L1 or group sup-norm penalty on the interquantile differences, with
        unit (FL, FS) or adaptive (FAL, FAS) weights.
    t : float
        Budget in [0, t_max]; t = 0 forces all differences to zero, and for
        the adaptive methods t = t_max reproduces the unpenalized fit.
    first_stage, initial : optional
        Precomputed first stage and initial (unpenalized) sheet, to avoid
        refitting when called repeatedly on the same data.
    """
    if method not in FUSED_METHODS:
        raise ValueError(f"method must be one of {FUSED_METHODS}, got {method!r}")
    if grid.k < 2:
        raise ValueError("fusion penalties need at least two quantile levels")
    t = _check_budget(method, t, budget_range(method, grid, data.p))
    fs = first_stage if first_stage is not None else first_stage_iv(data, grid)
    if method in ("FAL", "FAS") and initial is None:
        initial = fit_rq(data, grid, first_stage=fs).sheet
    weights = _fused_weights(method, grid, data.p, initial)
    layout = "FAL" if method in ("FL", "FAL") else "FAS"
    problem = build_joint_design(data, grid, fs, layout)
    sol = qrlp.solve(problem, _penalty_for(method, grid, data.p, weights, t))
    sheet = sheet_from_theta(ThetaVector(sol.theta, layout, grid.k, data.p))
    sheet = _with_sigma2(sheet, data)
    return FitResult(sheet=sheet, method=method, fused_mask=fused_mask_of(sheet), chosen_t=t)


def edf(result: FitResult | CoefficientSheet, tol: float = FUSION_TOL) -> int:
    """Count of nonzero unique slope values across quantiles.

    Each slope column (spatial lag and predictors; intercepts excluded) is
    segmented into runs of values that agree within ``tol``; runs whose level
    is nonzero at ``tol`` each contribute one degree of freedom.
    """
    sheet = result.sheet if isinstance(result, FitResult) else result
    total = 0
    for col in sheet.slope_table().T:
        start = 0
        for k in range(1, len(col) + 1):
            if k == len(col) or abs(col[k] - col[k - 1]) >= tol:
                if abs(float(np.mean(col[start:k]))) >= tol:
                    total += 1
                start = k
    return total


def tune(data: SqarDataset, grid: QuantileGrid, method: str, criterion: str = "BIC",
         grid_size: int = 50, first_stage: FirstStageResult | None = None,
         initial: CoefficientSheet | None = None) -> FitResult:
    """Pick the fusion budget on an equally spaced grid over [0, t_max].

    The information criteria combine the per-quantile logarithmic check loss
    with the effective degrees of freedom: AIC adds edf/n and BIC adds
    log(n) * edf / (2n).  Ties break toward the smaller budget.
    """
    if criterion not in ("AIC", "BIC"):
        raise ValueError(f"criterion must be 'AIC' or 'BIC', got {criterion!r}")
    if grid_size < 2:
        raise ValueError("grid_size must be at least 2")
    if method not in FUSED_METHODS:
        raise ValueError(f"tuning applies to {FUSED_METHODS}, got {method!r}")
    n, p = data.n, data.p
    fs = first_stage if first_stage is not None else first_stage_iv(data, grid)
    if method in ("FAL", "FAS") and initial is None:
        initial = fit_rq(data, grid, first_stage=fs).sheet
    weights = _fused_weights(method, grid, p, initial)
    layout = "FAL" if method in ("FL", "FAL") else "FAS"
    problem = build_joint_design(data, grid, fs, layout)

    t_grid = np.linspace(0.0, budget_range(method, grid, p), grid_size)
    losses = np.empty(grid_size)
    edfs = np.empty(grid_size, dtype=int)
    sheets = []
    for i, t in enumerate(t_grid):
        sol = qrlp.solve(problem, _penalty_for(method, grid, p, weights, t))
        resid = problem.response - problem.design @ sol.theta
        per_row = qrlp.check_loss_rows(problem.tau_of_row, resid).reshape(grid.k, n)
        losses[i] = float(np.sum(np.log(np.maximum(per_row.sum(axis=1), 1e-300))))
        sheet = sheet_from_theta(ThetaVector(sol.theta, layout, grid.k, p))
        edfs[i] = edf(sheet)
        sheets.append(sheet)

    aic = losses + edfs / n
    bic = losses + np.log(n) * edfs / (2.0 * n)
    score = aic if criterion == "AIC" else bic
    best = 0
    for i in range(1, grid_size):
        if score[i] < score[best]:
            best = i

    sheet = _with_sigma2(sheets[best], data)
    trace = TuningTrace(grid=t_grid, loss=losses, edf=edfs, aic=aic, bic=bic)
    return FitResult(sheet=sheet, method=method, fused_mask=fused_mask_of(sheet),
                     chosen_t=float(t_grid[best]), trace=trace)


# ---------------------------------------------------------------------------
# bootstrap equality testing


def _coefficient_index(coefficient, p: int) -> int:
    """Resolve a coefficient selector to a column of (alpha, lam, beta...)."""
    if isinstance(coefficient, str):
        name = coefficient.lower()
        if name == "alpha":
            return 0
        if name == "lambda":
            return 1
        if name.startswith("beta_"):
            j = int(name.split("_", 1)[1])
            if not 1 <= j <= p:
                raise ValueError(f"no predictor column {name!r} (p={p})")
            return 1 + j
        raise ValueError(f"unknown coefficient selector {coefficient!r}")
    idx = int(coefficient)
    if not 0 <= idx <= p + 1:
        raise ValueError(f"coefficient index {idx} out of range for p={p}")
    return idx


def _rq_coef_at(y, x, u, v, tau: float) -> np.ndarray:
    """Two-stage quantile coefficients from prebuilt lag and instrument rows."""
    n = y.shape[0]
    pi = qrlp.solve(qrlp.CheckLossProblem(v, u, np.full(n, tau)),
                    qrlp.PenaltySpec.none()).theta
    design = np.column_stack([np.ones(n), v @ pi, x])
    return qrlp.solve(qrlp.CheckLossProblem(design, y, np.full(n, tau)),
                      qrlp.PenaltySpec.none()).theta


def bootstrap_equality_test(data: SqarDataset, grid: QuantileGrid, coefficient,
                            subset, n_boot: int = 500, seed: int = 0) -> float:
    """P-value for equality of one coefficient across a subset of quantiles.

    Rows (Y_i, WY_i, instrument row i) are resampled in pairs; each resample
    refits both estimation stages at the subset quantiles.  The statistic is
    the quadratic form of the adjacent-difference contrasts against their
    bootstrap covariance, referred to chi-square with ``len(subset) - 1``
    degrees of freedom.  Deterministic for a fixed ``seed``.
    """
    subset = [int(s) for s in subset]
    if len(set(subset)) != len(subset):
        raise ValueError("subset has repeated quantile indices")
    if len(subset) < 2:
        raise ValueError("equality testing needs at least two quantile levels")
    if any(s < 0 or s >= grid.k for s in subset):
        raise ValueError("subset index outside the quantile grid")
    if n_boot < 100:
        raise ValueError("need at least 100 bootstrap replicates")
    subset = sorted(subset)
    taus = grid.taus[subset]
    col = _coefficient_index(coefficient, data.p)

    u = data.weights.values @ data.y
    v = build_instruments(data)
    base = np.array([_rq_coef_at(data.y, data.x, u, v, tau)[col] for tau in taus])
    contrast = np.diff(base)

    m = len(subset)
    boots = np.empty((n_boot, m - 1))
    for b in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), b]))
        idx = rng.integers(0, data.n, size=data.n)
        yb, xb, ub, vb = data.y[idx], data.x[idx], u[idx], v[idx]
        est = np.array([_rq_coef_at(yb, xb, ub, vb, tau)[col] for tau in taus])
        boots[b] = np.diff(est)

    cov = np.atleast_2d(np.cov(boots, rowvar=False))
    try:
        cond = np.linalg.cond(cov)
        if not np.isfinite(cond) or cond > 1e12:
            raise np.linalg.LinAlgError("ill conditioned")
        stat = float(contrast @ np.linalg.solve(cov, contrast))
    except np.linalg.LinAlgError:
        warnings.warn("bootstrap contrast covariance is singular; using a pseudo-inverse",
                      DegenerateCovariance, stacklevel=2)
        stat = float(contrast @ np.linalg.pinv(cov) @ contrast)
    return float(chi2.sf(stat, df=m - 1))
