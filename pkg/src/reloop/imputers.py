"""Leave-one-out counterfactual imputation on RCT data.

Every imputer returns, for each unit ``i``, predictions of ``y_i(0)`` and
``y_i(1)`` that are functions of the other units' data only. That property is
what makes the downstream LOOP estimator exactly unbiased, so every code path
here (including the degenerate-case fallbacks) must respect it:

    fallback chain: leave-i-out arm mean -> leave-i-out grand mean -> 0
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from . import _forest
from .domain import ContrastDataset


class ImputerKind(str, Enum):
    ZERO = "Zero"
    FIXED_REMNANT = "FixedRemnant"
    LOO_OLS = "LooOls"
    LOO_FOREST = "LooForest"
    ENSEMBLE = "Ensemble"


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    mtry: Optional[int] = None  # None -> ceil(n_features / 3)
    min_leaf: int = 5
    max_depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be positive")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ValueError("mtry must be positive")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be non-negative")


@dataclass(frozen=True)
class ImputerSpec:
    kind: ImputerKind
    forest: Optional[ForestParams] = None

    def __post_init__(self):
        kind = ImputerKind(self.kind)
        object.__setattr__(self, "kind", kind)
        needs_forest = kind in (ImputerKind.LOO_FOREST, ImputerKind.ENSEMBLE)
        if needs_forest != (self.forest is not None):
            raise ValueError(f"forest params must be given iff kind is LooForest or Ensemble ({kind.value})")


@dataclass(frozen=True)
class LooImputation:
    yhat0: np.ndarray
    yhat1: np.ndarray
    mhat: np.ndarray
    e0_sq: float
    e1_sq: float
    imputer_id: str


class ImputerPreconditionError(ValueError):
    """The dataset does not meet an imputer's size or input requirements."""


def make_imputation(ds: ContrastDataset, yhat0, yhat1, imputer_id: str) -> LooImputation:
    yhat0 = np.asarray(yhat0, dtype=float)
    yhat1 = np.asarray(yhat1, dtype=float)
    if yhat0.shape != (ds.n,) or yhat1.shape != (ds.n,):
        raise ValueError("imputations must have one entry per unit")
    if not (np.isfinite(yhat0).all() and np.isfinite(yhat1).all()):
        raise ValueError("imputations must be finite")
    p = ds.p
    mhat = p * yhat0 + (1.0 - p) * yhat1
    treated = ds.z == 1
    r0 = (yhat0 - ds.y)[~treated]
    r1 = (yhat1 - ds.y)[treated]
    e0 = float(np.mean(r0 * r0)) if r0.size else 0.0
    e1 = float(np.mean(r1 * r1)) if r1.size else 0.0
    for a in (yhat0, yhat1, mhat):
        a.setflags(write=False)
    return LooImputation(yhat0, yhat1, mhat, e0, e1, imputer_id)


def _require_remnant(ds: ContrastDataset) -> np.ndarray:
    if ds.yhat_r is None:
        raise ImputerPreconditionError(f"contrast {ds.contrast_id!r} has no remnant predictions")
    return ds.yhat_r


def _grand_mean_excluding(y: np.ndarray) -> np.ndarray:
    """Leave-i-out mean of all outcomes, 0 when nothing is left."""
    n = y.shape[0]
    if n < 2:
        return np.zeros(n)
    return (y.sum() - y) / (n - 1)


def _arm_mean_excluding(y, arm_mask) -> np.ndarray:
    """For every unit i, the mean of y over the arm minus i, with the fallback chain."""
    n = y.shape[0]
    cnt = arm_mask.sum() - arm_mask.astype(int)
    tot = y[arm_mask].sum() - np.where(arm_mask, y, 0.0)
    out = _grand_mean_excluding(y)
    ok = cnt > 0
    out[ok] = tot[ok] / cnt[ok]
    return out


def _check_arms(ds: ContrastDataset, minimum: int, what: str):
    small = min(ds.n1, ds.n0)
    if small < minimum:
        raise ImputerPreconditionError(
            f"{what} needs at least {minimum} units per arm; contrast {ds.contrast_id!r} has {small}"
        )


def impute_zero(ds: ContrastDataset) -> LooImputation:
    zeros = np.zeros(ds.n)
    return make_imputation(ds, zeros, zeros.copy(), ImputerKind.ZERO.value)


def impute_fixed_remnant(ds: ContrastDataset) -> LooImputation:
    r = _require_remnant(ds)
    return make_imputation(ds, r.copy(), r.copy(), ImputerKind.FIXED_REMNANT.value)


# ---------------------------------------------------------------- LOO OLS

def _extreme_excluding(v: np.ndarray, excl: np.ndarray, largest: bool) -> np.ndarray:
    """Max (or min) of v over positions other than excl[i], for each i."""
    order = np.argsort(-v if largest else v, kind="stable")
    first, second = order[0], order[min(1, v.size - 1)]
    return np.where(excl == first, v[second], v[first])


# Below this arm size the in-arm fits are recomputed without unit i instead of
# using the leverage identity, so y_i has no rounding path into its own prediction.
EXPLICIT_LOO_MAX = 512


def _explicit_loo_fits(xa: np.ndarray, ya: np.ndarray) -> np.ndarray:
    m = xa.size
    keep = ~np.eye(m, dtype=bool)
    X = np.where(keep, xa[None, :], 0.0)
    Y = np.where(keep, ya[None, :], 0.0)
    xbar = X.sum(axis=1) / (m - 1)
    ybar = Y.sum(axis=1) / (m - 1)
    dx = np.where(keep, xa[None, :] - xbar[:, None], 0.0)
    dy = np.where(keep, ya[None, :] - ybar[:, None], 0.0)
    sxx = (dx * dx).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = (dx * dy).sum(axis=1) / sxx
    return ybar + slope * (xa - xbar)


def _loo_ols_arm(x, y, arm_mask) -> np.ndarray:
    """Predictions from the intercept+slope fit on (arm minus i), for every unit i."""
    n = x.shape[0]
    idx = np.flatnonzero(arm_mask)
    m = idx.size
    pred = _arm_mean_excluding(y, arm_mask)
    if m == 0:
        return pred
    xa, ya = x[idx], y[idx]
    xbar, ybar = xa.mean(), ya.mean()
    dx = xa - xbar
    sxx = float(dx @ dx)
    full_ok = m >= 2 and xa.max() > xa.min()

    outside = ~arm_mask
    if full_ok:
        slope = float(dx @ (ya - ybar)) / sxx
        pred[outside] = ybar + slope * (x[outside] - xbar)
    # else: outside units keep the arm mean, which is already in pred

    if m >= 3 and full_ok:
        pos = np.arange(m)
        hi = _extreme_excluding(xa, pos, largest=True)
        lo = _extreme_excluding(xa, pos, largest=False)
        ok = hi > lo
        if m <= EXPLICIT_LOO_MAX:
            loo = _explicit_loo_fits(xa, ya)
        else:
            h = 1.0 / m + dx * dx / sxx
            resid = ya - (ybar + slope * dx)
            loo = ya - resid / np.where(ok, 1.0 - h, 1.0)
        inside = idx[ok]
        pred[inside] = loo[ok]
    return pred


def impute_loo_ols(ds: ContrastDataset, strict: bool = True) -> LooImputation:
    """Per-arm leave-one-out OLS of Y on the remnant prediction.

    For each arm and unit ``i`` the fit uses the arm without ``i``. In-arm
    predictions come from the leverage identity ``y_i - e_i / (1 - h_ii)``.
    With ``strict=False`` arms smaller than three are allowed and handled by
    the fallback chain, making the imputer total over assignment vectors.
    """
    r = _require_remnant(ds)
    if strict:
        _check_arms(ds, 3, "LOO OLS")
    yhat0 = _loo_ols_arm(r, ds.y, ds.z == 0)
    yhat1 = _loo_ols_arm(r, ds.y, ds.z == 1)
    return make_imputation(ds, yhat0, yhat1, ImputerKind.LOO_OLS.value)


def _l2o_ols_sq_errors(x, y, arm_mask, y_all) -> np.ndarray:
    """Squared errors for predicting arm unit b from the fit on (arm minus a, b).

    Returns an (m, m) matrix indexed by arm positions (a, b); the diagonal is
    meaningless and set to NaN. Degenerate fits fall back to the remaining
    arm mean, then the grand mean over the contrast without a and b, then 0.
    """
    idx = np.flatnonzero(arm_mask)
    m = idx.size
    xa = x[idx] - x[idx].mean()
    ya = y[idx] - y[idx].mean()
    shift = y[idx].mean()
    sx, sy = xa.sum(), ya.sum()
    sxx, sxy = xa @ xa, xa @ ya
    A = np.arange(m)[:, None]
    Bm = np.arange(m)[None, :]
    c = m - 2
    cx = sx - xa[:, None] - xa[None, :]
    cy = sy - ya[:, None] - ya[None, :]
    cxx = sxx - (xa * xa)[:, None] - (xa * xa)[None, :]
    cxy = sxy - (xa * ya)[:, None] - (xa * ya)[None, :]

    n_all = y_all.shape[0]
    if n_all > 2:
        grand = (y_all.sum() - y[idx][:, None] - y[idx][None, :]) / (n_all - 2)
    else:
        grand = np.zeros((m, m))
    if c >= 1:
        pred = cy / c + shift
    else:
        pred = grand
    if c >= 2:
        # exact degeneracy: all remaining x equal
        order = np.argsort(xa, kind="stable")
        top = order[::-1][:3]
        bot = order[:3]

        def ext(cands):
            out = np.full((m, m), xa[cands[-1]])
            for t in reversed(range(len(cands))):
                j = cands[t]
                keep = (A != j) & (Bm != j)
                out = np.where(keep, xa[j], out)
            return out

        spread = ext(top) > ext(bot)
        denom = cxx - cx * cx / c
        safe = np.where(spread, denom, 1.0)
        slope = np.where(spread, (cxy - cx * cy / c) / safe, 0.0)
        fit = cy / c + slope * (xa[None, :] - cx / c) + shift
        pred = np.where(spread, fit, pred)
    err = (pred - y[idx][None, :]) ** 2
    err[A == Bm] = np.nan
    return err


# ---------------------------------------------------------------- forest

def poisson_bootstrap_weights(n: int, n_trees: int, seed: int) -> np.ndarray:
    """Bootstrap multiplicities, one row per tree and one column per unit.

    Weights are keyed on (tree, unit) rather than on arm position, so a unit's
    out-of-bag status in tree b does not depend on anyone's assignment.
    """
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), 0x6F6F62])))
    return rng.poisson(1.0, size=(n_trees, n)).astype(np.int64)


@dataclass
class ForestFit:
    """Raw per-tree output for one arm's forest."""

    P: np.ndarray  # (B, n) tree predictions for every unit
    oob: np.ndarray  # (B, n) float indicator: tree usable for unit i
    arm_mask: np.ndarray


def _features(ds: ContrastDataset, use_remnant: bool, use_covariates: bool = True) -> np.ndarray:
    cols = []
    if use_covariates and ds.k:
        cols.append(ds.x)
    if use_remnant:
        cols.append(_require_remnant(ds)[:, None])
    if not cols:
        raise ImputerPreconditionError(f"contrast {ds.contrast_id!r} has no forest features")
    return np.ascontiguousarray(np.hstack(cols))


def _fit_forests(ds: ContrastDataset, feats: np.ndarray, params: ForestParams):
    n, d = feats.shape
    mtry = params.mtry if params.mtry is not None else max(1, math.ceil(d / 3))
    mtry = min(mtry, d)
    max_depth = -1 if params.max_depth is None else params.max_depth
    W = poisson_bootstrap_weights(n, params.n_trees, params.seed)
    out_of_bag = (W == 0).astype(float)
    fits = {}
    for arm in (0, 1):
        mask = ds.z == arm
        rows = np.flatnonzero(mask).astype(np.int64)
        P, valid = _forest.forest_predictions(
            feats, ds.y, rows, W, params.min_leaf, max_depth, mtry, params.seed, arm
        )
        fits[arm] = ForestFit(P=P, oob=out_of_bag * valid[:, None], arm_mask=mask)
    return fits, W


def _forest_arm_predictions(fit: ForestFit, y) -> np.ndarray:
    num = (fit.oob * fit.P).sum(axis=0)
    den = fit.oob.sum(axis=0)
    pred = _arm_mean_excluding(y, fit.arm_mask)
    ok = den > 0
    pred[ok] = num[ok] / den[ok]
    return pred


def impute_loo_forest(
    ds: ContrastDataset,
    params: ForestParams = ForestParams(),
    use_remnant: bool = True,
    use_covariates: bool = True,
    strict: bool = True,
) -> LooImputation:
    """Out-of-bag random-forest imputation, one forest per arm.

    Unit ``i``'s prediction from either arm's forest averages only trees in
    which ``i`` has bootstrap weight zero, so no tree that saw ``i`` contributes.
    Units that are in-bag everywhere get the leave-i-out arm mean.
    """
    feats = _features(ds, use_remnant, use_covariates)
    if strict:
        _check_arms(ds, max(3, params.min_leaf), "LOO forest")
    fits, _ = _fit_forests(ds, feats, params)
    yhat0 = _forest_arm_predictions(fits[0], ds.y)
    yhat1 = _forest_arm_predictions(fits[1], ds.y)
    return make_imputation(ds, yhat0, yhat1, ImputerKind.LOO_FOREST.value)


def _l2o_forest_sq_errors(fit: ForestFit, y, y_all) -> np.ndarray:
    """(n, m) squared errors predicting arm unit j from trees out-of-bag for both i and j."""
    idx = np.flatnonzero(fit.arm_mask)
    O = fit.oob
    Oa = O[:, idx]
    num = O.T @ (Oa * fit.P[:, idx])
    den = O.T @ Oa
    n = y.shape[0]
    m = idx.size
    # fallback: mean of arm without i and j, then grand mean without both, then 0
    in_arm = fit.arm_mask.astype(float)
    cnt = m - in_arm[:, None] - 1.0
    tot = y[idx].sum() - (y * in_arm)[:, None] - y[idx][None, :]
    if n > 2:
        fb = (y_all.sum() - y[:, None] - y[idx][None, :]) / (n - 2)
    else:
        fb = np.zeros((n, m))
    fb = np.where(cnt > 0, tot / np.where(cnt > 0, cnt, 1.0), fb)
    pred = np.where(den > 0, num / np.where(den > 0, den, 1.0), fb)
    err = (pred - y[idx][None, :]) ** 2
    err[idx, np.arange(m)] = np.nan
    return err


TIE_RTOL = 1e-10


@dataclass(frozen=True)
class EnsembleSelection:
    """Per-unit, per-arm choice between the OLS and forest candidates."""

    use_forest: dict  # arm -> bool array over units
    mse_ols: dict  # arm -> leave-i-out candidate MSE per unit
    mse_forest: dict
    ols: LooImputation = field(repr=False)
    forest: LooImputation = field(repr=False)


def ensemble_selection(
    ds: ContrastDataset, params: ForestParams = ForestParams(), strict: bool = True
) -> EnsembleSelection:
    """Score both candidates for every (unit, arm) without touching unit i.

    The score for unit ``i`` in arm ``z`` is the mean squared error of each
    candidate when predicting the other members ``j`` of arm ``z`` from fits
    that exclude both ``i`` and ``j``. Smaller wins; ties go to OLS.
    """
    r = _require_remnant(ds)
    if strict:
        _check_arms(ds, max(3, params.min_leaf), "ensemble")
    ols = impute_loo_ols(ds, strict=False)
    feats = _features(ds, use_remnant=True)
    fits, _ = _fit_forests(ds, feats, params)
    forest = make_imputation(
        ds,
        _forest_arm_predictions(fits[0], ds.y),
        _forest_arm_predictions(fits[1], ds.y),
        ImputerKind.LOO_FOREST.value,
    )
    use_forest, mse_o, mse_f = {}, {}, {}
    for arm in (0, 1):
        mask = ds.z == arm
        idx = np.flatnonzero(mask)
        m = idx.size
        yhat = ols.yhat0 if arm == 0 else ols.yhat1
        ols_mse = np.full(ds.n, np.nan)
        if m >= 2:
            ols_mse[~mask] = ((yhat[idx] - ds.y[idx]) ** 2).mean()
        elif m == 1:
            # lone arm member: its fallback is the grand mean without it and without i
            j = idx[0]
            others = ~mask
            if ds.n > 2:
                fb = (ds.y.sum() - ds.y[j] - ds.y[others]) / (ds.n - 2)
            else:
                fb = np.zeros(others.sum())
            ols_mse[others] = (fb - ds.y[j]) ** 2
        if m >= 2:
            e2 = _l2o_ols_sq_errors(r, ds.y, mask, ds.y)
            ols_mse[idx] = np.nanmean(e2, axis=1)
        f_mse = np.full(ds.n, np.nan)
        if m:
            ef = _l2o_forest_sq_errors(fits[arm], ds.y, ds.y)
            counts = m - mask.astype(int)
            sums = np.nansum(ef, axis=1)
            has = counts > 0
            f_mse[has] = sums[has] / counts[has]
        pick = np.zeros(ds.n, dtype=bool)
        comparable = np.isfinite(ols_mse) & np.isfinite(f_mse)
        # near-ties (same fallback on both sides, rounding noise) count as ties
        o, f = ols_mse[comparable], f_mse[comparable]
        pick[comparable] = f < o - TIE_RTOL * np.maximum(np.abs(o), 1e-300)
        use_forest[arm], mse_o[arm], mse_f[arm] = pick, ols_mse, f_mse
    return EnsembleSelection(use_forest, mse_o, mse_f, ols, forest)


def impute_ensemble(
    ds: ContrastDataset, params: ForestParams = ForestParams(), strict: bool = True
) -> LooImputation:
    sel = ensemble_selection(ds, params, strict=strict)
    yhat0 = np.where(sel.use_forest[0], sel.forest.yhat0, sel.ols.yhat0)
    yhat1 = np.where(sel.use_forest[1], sel.forest.yhat1, sel.ols.yhat1)
    return make_imputation(ds, yhat0, yhat1, ImputerKind.ENSEMBLE.value)


def impute(ds: ContrastDataset, spec: ImputerSpec, strict: bool = True) -> LooImputation:
    kind = spec.kind
    if kind is ImputerKind.ZERO:
        return impute_zero(ds)
    if kind is ImputerKind.FIXED_REMNANT:
        return impute_fixed_remnant(ds)
    if kind is ImputerKind.LOO_OLS:
        return impute_loo_ols(ds, strict=strict)
    if kind is ImputerKind.LOO_FOREST:
        return impute_loo_forest(ds, spec.forest, strict=strict)
    return impute_ensemble(ds, spec.forest, strict=strict)
