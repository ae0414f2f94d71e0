"""Small dataset builders shared by the test modules."""

import numpy as np

from reloop.domain import ContrastDataset


def make_dataset(rng, n=40, k=2, p=0.5, remnant=True, tau=0.3, contrast_id="c"):
    x = rng.standard_normal((n, k))
    y0 = x.sum(axis=1) + rng.standard_normal(n)
    z = (rng.random(n) < p).astype(int)
    y = y0 + tau * z
    r = y0 + 0.5 * rng.standard_normal(n) if remnant else None
    return ContrastDataset(contrast_id, z, y, x, yhat_r=r, p=p)


def explicit_loo_ols(x, y, arm_mask):
    """Refit intercept + slope on (arm minus i) for every unit: the n-refit oracle."""
    n = len(y)
    out = np.empty(n)
    for i in range(n):
        keep = arm_mask.copy()
        keep[i] = False
        xa, ya = x[keep], y[keep]
        A = np.column_stack([np.ones(keep.sum()), xa])
        coef = np.linalg.lstsq(A, ya, rcond=None)[0]
        out[i] = coef[0] + coef[1] * x[i]
    return out
