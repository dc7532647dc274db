import numpy as np
from scipy.stats import norm

from sqar import SqarDataset, build_block_weight_matrix, reduced_form_response

NINE_TAUS = np.linspace(0.1, 0.9, 9)


def make_sqar_data(m1=6, m2=4, lam=0.4, seed=0, b=0.5, c0=0.0, c1=0.0,
                   alpha=3.0, beta=3.0, noise=1.0, taus=NINE_TAUS):
    """Small synthetic dataset from the per-observation quantile generator."""
    rng = np.random.default_rng(seed)
    w = build_block_weight_matrix(m1, m2)
    n = w.n
    z = norm.ppf(rng.choice(taus, size=n))
    x = rng.uniform(size=(n, 1))
    eps = noise * rng.standard_normal(n)
    y = reduced_form_response(alpha + b * z, lam + c0 * z, (beta + c1 * z) * x[:, 0], eps, w)
    return SqarDataset(y=y, x=x, weights=w)
