"""Normal-approximation inference, FDR step-up adjustments and variance ratios."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm

from .estimators import EffectEstimate


@dataclass(frozen=True)
class InferenceResult:
    estimate: EffectEstimate
    se: float
    ci_lo: float
    ci_hi: float
    p_value: float
    alpha: float


def z_inference(est: EffectEstimate, alpha: float = 0.05) -> InferenceResult:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    se = math.sqrt(est.var_hat)
    half = norm.ppf(1.0 - alpha / 2.0) * se
    if se == 0.0:
        pval = 1.0 if est.tau_hat == 0.0 else 0.0
    else:
        pval = float(2.0 * norm.sf(abs(est.tau_hat) / se))
    return InferenceResult(est, se, est.tau_hat - half, est.tau_hat + half, min(1.0, pval), alpha)


@dataclass(frozen=True)
class FdrResult:
    rejected: np.ndarray  # bool, input order
    adjusted: np.ndarray  # adjusted p-values, input order

    @property
    def n_rejected(self) -> int:
        return int(self.rejected.sum())


def _step_up(pvals, alpha: float, factor: float) -> FdrResult:
    p = np.asarray(pvals, dtype=float)
    if p.ndim != 1:
        raise ValueError("p-values must be one-dimensional")
    if p.size and (np.isnan(p).any() or p.min() < 0 or p.max() > 1):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    if m == 0:
        return FdrResult(np.zeros(0, bool), np.zeros(0))
    order = np.argsort(p, kind="stable")
    ranks = np.arange(1, m + 1)
    # q_(i) <= alpha  <=>  p_(i) <= i * alpha / (m * factor); the same q feeds
    # both the rejection rule and the adjusted values so the two agree exactly.
    q = p[order] * (m * factor) / ranks
    hits = np.flatnonzero(q <= alpha)
    rej_sorted = np.zeros(m, bool)
    if hits.size:
        rej_sorted[: hits[-1] + 1] = True
    adj_sorted = np.minimum.accumulate(np.minimum(q, 1.0)[::-1])[::-1]
    rejected = np.empty(m, bool)
    adjusted = np.empty(m)
    rejected[order] = rej_sorted
    adjusted[order] = adj_sorted
    return FdrResult(rejected, adjusted)


def bh_adjust(pvals, alpha: float = 0.05) -> FdrResult:
    """Benjamini-Hochberg step-up (FDR control for independent tests)."""
    return _step_up(pvals, alpha, 1.0)


def harmonic(m: int) -> float:
    return float(sum(1.0 / j for j in range(1, m + 1)))


def by_adjust(pvals, alpha: float = 0.05) -> FdrResult:
    """Benjamini-Yekutieli step-up (FDR control under arbitrary dependence)."""
    m = len(pvals)
    return _step_up(pvals, alpha, harmonic(m) if m else 1.0)


def variance_ratio(v_baseline: float, v_method: float) -> float:
    """Baseline variance over method variance; > 1 means the method acts like a larger sample."""
    if not v_method > 0:
        raise ZeroDivisionError("variance ratio undefined for a non-positive method variance")
    return v_baseline / v_method
