"""Effect estimators: difference in means, rebar, ANCOVA and the LOOP family."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .domain import ContrastDataset
from .imputers import (
    ForestParams,
    ImputerPreconditionError,
    LooImputation,
    impute_ensemble,
    impute_fixed_remnant,
    impute_loo_forest,
    impute_loo_ols,
    impute_zero,
)

TTEST = "TTest"
REBAR = "Rebar"
ANCOVA = "AncovaOls"
LOOP_X = "Loop_x"
RELOOP = "ReLoop"
RELOOP_PLUS = "ReLoopPlus"
ALL_ESTIMATORS = (TTEST, REBAR, ANCOVA, LOOP_X, RELOOP, RELOOP_PLUS)


@dataclass(frozen=True)
class EffectEstimate:
    estimator_id: str
    tau_hat: float
    var_hat: float
    n: int
    n1: int
    n0: int
    p: float

    def __post_init__(self):
        if not math.isfinite(self.tau_hat):
            raise ValueError(f"{self.estimator_id}: non-finite point estimate")
        if not self.var_hat >= 0:
            raise ValueError(f"{self.estimator_id}: variance estimate must be >= 0, got {self.var_hat}")


def _arms(ds: ContrastDataset, values: np.ndarray, what: str):
    t = values[ds.z == 1]
    c = values[ds.z == 0]
    if t.size == 0 or c.size == 0:
        raise ValueError(f"{what}: both arms must be non-empty")
    if t.size < 2 or c.size < 2:
        raise ValueError(f"{what}: variance needs at least two units per arm")
    return t, c


def _welch(ds: ContrastDataset, values: np.ndarray, estimator_id: str) -> EffectEstimate:
    t, c = _arms(ds, values, estimator_id)
    tau = float(t.mean() - c.mean())
    var = float(t.var(ddof=1) / t.size + c.var(ddof=1) / c.size)
    return EffectEstimate(estimator_id, tau, var, ds.n, t.size, c.size, ds.p)


def diff_in_means(ds: ContrastDataset) -> EffectEstimate:
    """Treated mean minus control mean, with the unpooled (Welch) variance."""
    return _welch(ds, ds.y, TTEST)


def rebar(ds: ContrastDataset) -> EffectEstimate:
    """Difference in means of the residuals ``Y - yhat_r``."""
    if ds.yhat_r is None:
        raise ImputerPreconditionError("rebar needs remnant predictions")
    return _welch(ds, ds.y - ds.yhat_r, REBAR)


def ancova_ols(ds: ContrastDataset) -> EffectEstimate:
    """Coefficient on Z from OLS of Y on (1, yhat_r, Z), with an HC2 variance.

    A constant ``yhat_r`` is dropped, which reduces the fit to the difference
    in means (point estimate) with the HC2 variance of that regression.
    """
    if ds.yhat_r is None:
        raise ImputerPreconditionError("ANCOVA needs remnant predictions")
    if ds.n < 4:
        raise ValueError("ANCOVA needs at least 4 units")
    z = ds.z.astype(float)
    cols = [np.ones(ds.n)]
    if np.ptp(ds.yhat_r) > 0:
        cols.append(ds.yhat_r)
    cols.append(z)
    X = np.column_stack(cols)
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise ValueError("ANCOVA design matrix is rank deficient")
    xtx_inv = np.linalg.inv(X.T @ X)
    beta = xtx_inv @ (X.T @ ds.y)
    resid = ds.y - X @ beta
    h = np.einsum("ij,jk,ik->i", X, xtx_inv, X)
    if np.any(h >= 1.0 - 1e-12):
        raise ValueError("ANCOVA has a unit with leverage 1; HC2 undefined")
    omega = resid**2 / (1.0 - h)
    cov = xtx_inv @ (X.T * omega) @ X @ xtx_inv
    return EffectEstimate(ANCOVA, float(beta[-1]), float(max(cov[-1, -1], 0.0)), ds.n, ds.n1, ds.n0, ds.p)


def loop_variance(imp: LooImputation, n: int, p: float) -> float:
    """Conservative variance estimate of the LOOP estimator."""
    e0, e1 = imp.e0_sq, imp.e1_sq
    if e0 < 0 or e1 < 0:
        raise ValueError("mean squared errors must be non-negative")
    return (p / (1 - p) * e0 + (1 - p) / p * e1 + 2.0 * math.sqrt(e0 * e1)) / n


def loop_point(ds: ContrastDataset, imp: LooImputation, estimator_id: Optional[str] = None) -> EffectEstimate:
    """Inverse-probability-weighted contrast of ``Y - mhat`` with expected arm sizes.

    Sums over an empty arm are zero, so the estimator is defined for every
    assignment vector.
    """
    if imp.mhat.shape != (ds.n,):
        raise ValueError("imputation length does not match the dataset")
    n, p = ds.n, ds.p
    resid = ds.y - imp.mhat
    treated = ds.z == 1
    tau = float(resid[treated].sum() / (n * p) - resid[~treated].sum() / (n * (1 - p)))
    return EffectEstimate(
        estimator_id or f"Loop[{imp.imputer_id}]",
        tau,
        loop_variance(imp, n, p),
        n,
        ds.n1,
        ds.n0,
        p,
    )


@dataclass
class EstimateSet:
    estimates: dict = field(default_factory=dict)  # estimator_id -> EffectEstimate
    skipped: dict = field(default_factory=dict)  # estimator_id -> reason


def run_estimator(ds: ContrastDataset, estimator_id: str, forest: ForestParams = ForestParams(),
                  strict: bool = True) -> EffectEstimate:
    """Dispatch one named estimator. ``strict=False`` relaxes imputer size checks."""
    if estimator_id == TTEST:
        return diff_in_means(ds)
    if estimator_id == REBAR:
        return rebar(ds)
    if estimator_id == ANCOVA:
        return ancova_ols(ds)
    if estimator_id == LOOP_X:
        if ds.k == 0:
            raise ImputerPreconditionError("Loop_x needs at least one covariate")
        return loop_point(ds, impute_loo_forest(ds, forest, use_remnant=False, strict=strict), LOOP_X)
    if estimator_id == RELOOP:
        return loop_point(ds, impute_loo_ols(ds, strict=strict), RELOOP)
    if estimator_id == RELOOP_PLUS:
        return loop_point(ds, impute_ensemble(ds, forest, strict=strict), RELOOP_PLUS)
    if estimator_id == "Loop_zero":
        return loop_point(ds, impute_zero(ds), estimator_id)
    if estimator_id == "Loop_fixed":
        return loop_point(ds, impute_fixed_remnant(ds), estimator_id)
    raise KeyError(f"unknown estimator {estimator_id!r}")


def estimate_all(
    ds: ContrastDataset,
    forest: ForestParams = ForestParams(),
    estimators: Optional[Sequence[str]] = None,
) -> EstimateSet:
    """Run every requested estimator, recording instead of raising on failure."""
    out = EstimateSet()
    for eid in estimators or ALL_ESTIMATORS:
        if ds.yhat_r is None and eid in (REBAR, ANCOVA, RELOOP, RELOOP_PLUS):
            out.skipped[eid] = "MissingRemnantPredictions"
            continue
        try:
            out.estimates[eid] = run_estimator(ds, eid, forest)
        except (ValueError, np.linalg.LinAlgError) as exc:
            out.skipped[eid] = f"{type(exc).__name__}: {exc}"
    return out
