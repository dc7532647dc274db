"""Spatial weight matrices and the linear algebra behind spatial autoregression.

Weight matrices are stored dense: the target problem sizes (a few hundred
units) give sparse storage no payoff, and dense LU factorization with a
reciprocal-condition check is both fast and honest about near-singularity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import get_lapack_funcs, lu_factor, lu_solve

from .exceptions import InvalidLambda, SingularSystem

# Reciprocal condition estimates below this raise SingularSystem.
_RCOND_MIN = 1e-12


@dataclass(frozen=True)
class SpatialWeights:
    """A zero-diagonal, nonnegative matrix of neighbor weights.

    Parameters
    ----------
    n : int
        Number of spatial units.
    values : ndarray of shape (n, n)
        Weight of unit j in the spatial lag of unit i at ``values[i, j]``.
    row_normalized : bool
        When True, every row with a nonzero entry sums to 1 (within 1e-12).
    """

    n: int
    values: np.ndarray
    row_normalized: bool = False

    def __post_init__(self):
        w = np.array(self.values, dtype=float, order="C")
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got shape {w.shape}")
        if self.n != w.shape[0]:
            raise ValueError(f"n={self.n} does not match matrix order {w.shape[0]}")
        if not np.all(np.isfinite(w)):
            raise ValueError("weight matrix contains non-finite entries")
        if np.any(np.diagonal(w) != 0.0):
            raise ValueError("diagonal entries must be exactly zero")
        if np.any(w < 0.0):
            raise ValueError("weights must be nonnegative")
        if self.row_normalized:
            sums = w.sum(axis=1)
            bad = np.abs(sums - 1.0) > 1e-12
            if np.any(bad & (sums != 0.0)):
                raise ValueError("row_normalized set but a nonzero row does not sum to 1")
        w.setflags(write=False)
        object.__setattr__(self, "values", w)


@dataclass(frozen=True)
class SqarDataset:
    """Response vector, predictor matrix, and the attached spatial weights."""

    y: np.ndarray
    x: np.ndarray
    weights: SpatialWeights

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float, order="C")
        if x.ndim == 1:
            x = x[:, None]
        n, p = x.shape
        if y.shape[0] != n:
            raise ValueError(f"y has {y.shape[0]} rows but x has {n}")
        if self.weights.n != n:
            raise ValueError(f"weights are {self.weights.n}x{self.weights.n} but data has {n} rows")
        if n < p + 3:
            raise ValueError(f"need n >= p + 3 to identify intercept, spatial lag and slopes (n={n}, p={p})")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
            raise ValueError("dataset contains non-finite entries")
        y.setflags(write=False)
        x.setflags(write=False)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def build_block_weight_matrix(m1: int, m2: int) -> SpatialWeights:
    """Block-diagonal weights with m1 groups of m2 mutually adjacent units.

    Each diagonal block is the equal-weight matrix (J - I) / (m2 - 1), so the
    result is row-normalized by construction and symmetric.
    """
    if m1 < 1:
        raise ValueError(f"m1 must be >= 1, got {m1}")
    if m2 < 2:
        raise ValueError(f"m2 must be >= 2, got {m2}")
    block = (np.ones((m2, m2)) - np.eye(m2)) / (m2 - 1)
    w = np.kron(np.eye(m1), block)
    return SpatialWeights(n=m1 * m2, values=w, row_normalized=True)


def row_normalize(w: SpatialWeights) -> SpatialWeights:
    """Divide each nonzero row by its sum; zero rows are left untouched."""
    values = np.array(w.values, dtype=float)
    sums = values.sum(axis=1)
    nz = sums != 0.0
    values[nz] /= sums[nz, None]
    return SpatialWeights(n=w.n, values=values, row_normalized=True)


def _solve_checked(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """LU solve with a reciprocal-condition guard and one refinement step."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # rcond check below reports singularity
            lu, piv = lu_factor(a)
    except Exception as exc:  # LinAlgError on exact singularity
        raise SingularSystem(f"factorization failed: {exc}") from exc
    gecon = get_lapack_funcs(("gecon",), (a,))[0]
    rcond, info = gecon(lu, np.linalg.norm(a, 1))
    if info != 0 or not np.isfinite(rcond) or rcond < _RCOND_MIN:
        raise SingularSystem(f"system is numerically singular (rcond={rcond:.3e})")
    x = lu_solve((lu, piv), b)
    x += lu_solve((lu, piv), b - a @ x)
    return x


def solve_spatial_system(
    lam: float,
    w: SpatialWeights,
    b: np.ndarray,
    check_lambda: bool = True,
) -> np.ndarray:
    """Solve (I - lam * W) x = b.

    For row-normalized W, |lam| < 1 is sufficient for invertibility; the
    guard rejects |lam| >= 1 unless ``check_lambda=False`` opts out. The
    returned solution satisfies ||(I - lam W) x - b||_inf < 1e-10 (1 + ||b||_inf).
    """
    lam = float(lam)
    if check_lambda and w.row_normalized and abs(lam) >= 1.0:
        raise InvalidLambda(f"|lambda| = {abs(lam):.6g} >= 1 for a row-normalized weight matrix")
    b = np.asarray(b, dtype=float).reshape(-1)
    if b.shape[0] != w.n:
        raise ValueError(f"right-hand side has length {b.shape[0]}, expected {w.n}")
    a = np.eye(w.n) - lam * w.values
    return _solve_checked(a, b)


def reduced_form_response(
    alpha: np.ndarray,
    lam: np.ndarray,
    beta_x: np.ndarray,
    eps: np.ndarray,
    w: SpatialWeights,
) -> np.ndarray:
    """Generate Y from per-observation coefficients.

    Solves (I - diag(lam) W) Y = alpha + beta_x + eps, the vectorized reduced
    form; with a constant ``lam`` this is the usual scalar-lag reduced form.

    Parameters
    ----------
    alpha, lam, beta_x, eps : ndarray of shape (n,)
        Per-observation intercepts, spatial lags, X'beta contributions, and
        disturbances.
    """
    n = w.n
    parts = []
    for name, v in (("alpha", alpha), ("lam", lam), ("beta_x", beta_x), ("eps", eps)):
        v = np.asarray(v, dtype=float).reshape(-1)
        if v.shape[0] != n:
            raise ValueError(f"{name} has length {v.shape[0]}, expected {n}")
        parts.append(v)
    alpha, lam, beta_x, eps = parts
    a = np.eye(n) - lam[:, None] * w.values
    return _solve_checked(a, alpha + beta_x + eps)


def estimate_noise_variance(
    alpha_k: float,
    lam_k: float,
    beta_k: np.ndarray,
    data: SqarDataset,
    check_lambda: bool = True,
) -> float:
    """Per-quantile disturbance variance of a fitted coefficient triple.

    Computes P = (I - lam W)^{-1}(alpha + X beta) and returns
    ||(I - lam W)(Y - P)||^2 / n, which never requires forming an inverse.
    """
    beta_k = np.asarray(beta_k, dtype=float).reshape(-1)
    if beta_k.shape[0] != data.p:
        raise ValueError(f"beta has length {beta_k.shape[0]}, expected {data.p}")
    mean_part = float(alpha_k) + data.x @ beta_k
    p_vec = solve_spatial_system(lam_k, data.weights, mean_part, check_lambda=check_lambda)
    resid = data.y - p_vec
    transformed = resid - float(lam_k) * (data.weights.values @ resid)
    return float(transformed @ transformed) / data.n
