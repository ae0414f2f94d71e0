"""Tercile subgroups, per-subgroup estimation and post-stratification."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .domain import ContrastDataset, Reason
from .estimators import EffectEstimate, EstimateSet, estimate_all
from .imputers import ForestParams

LOW = "Low"
HIGH = "High"


@dataclass(frozen=True)
class SubgroupScheme:
    covariate_id: str
    q_lo: float
    q_hi: float

    def __post_init__(self):
        if not self.q_lo <= self.q_hi:
            raise ValueError("q_lo must not exceed q_hi")

    def labels(self, values) -> np.ndarray:
        """'Low' below q_lo, 'High' above q_hi, None otherwise (boundaries excluded)."""
        v = np.asarray(values, dtype=float)
        out = np.full(v.shape, None, dtype=object)
        out[v < self.q_lo] = LOW
        out[v > self.q_hi] = HIGH
        return out


@dataclass(frozen=True)
class PopulationWeights:
    weights: Mapping[str, float]

    def __post_init__(self):
        w = dict(self.weights)
        if not w:
            raise ValueError("population weights are empty")
        if any(not 0.0 <= v <= 1.0 for v in w.values()):
            raise ValueError("population weights must lie in [0, 1]")
        if abs(math.fsum(w.values()) - 1.0) > 1e-12:
            raise ValueError(f"population weights must sum to 1, got {math.fsum(w.values())!r}")
        object.__setattr__(self, "weights", w)


def pooled_terciles(values) -> tuple[float, float]:
    """Lower (inverse-CDF) empirical 1/3 and 2/3 quantiles."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    n = v.size
    if n < 3:
        raise ValueError("need at least 3 values for terciles")
    if not np.isfinite(v).all():
        raise ValueError("tercile input must be finite")
    lo = -(-n // 3)  # ceil(n/3), 1-based order statistic
    hi = -(-2 * n // 3)
    return float(v[lo - 1]), float(v[hi - 1])


def make_scheme(covariate_id: str, pooled_values) -> SubgroupScheme:
    q_lo, q_hi = pooled_terciles(pooled_values)
    return SubgroupScheme(covariate_id, q_lo, q_hi)


def covariate_values(ds: ContrastDataset, covariate_id: str) -> np.ndarray:
    if covariate_id == "yhat_r":
        if ds.yhat_r is None:
            raise KeyError("yhat_r is not available")
        return ds.yhat_r
    try:
        j = ds.covariate_names.index(covariate_id)
    except ValueError:
        raise KeyError(f"unknown covariate {covariate_id!r}") from None
    return ds.x[:, j]


@dataclass
class SubgroupResult:
    label: str
    arm_sizes: tuple
    estimates: Optional[EstimateSet] = None
    skip_reason: Optional[str] = None


def estimate_subgroups(
    ds: ContrastDataset,
    scheme: SubgroupScheme,
    min_arm: int = 10,
    forest: ForestParams = ForestParams(),
    estimators: Optional[Sequence[str]] = None,
) -> dict:
    """Estimate effects within the Low and High subgroups of one contrast."""
    labels = scheme.labels(covariate_values(ds, scheme.covariate_id))
    out = {}
    for label in (LOW, HIGH):
        mask = labels == label
        sub_z = ds.z[mask]
        n1 = int(sub_z.sum())
        n0 = int(mask.sum()) - n1
        res = SubgroupResult(label, (n1, n0))
        if min(n1, n0) < min_arm:
            res.skip_reason = Reason.ARM_TOO_SMALL.value
        else:
            sub = ds.subset(mask)
            if np.ptp(sub.y[sub.z == 1]) == 0 or np.ptp(sub.y[sub.z == 0]) == 0:
                res.skip_reason = Reason.ZERO_OUTCOME_VARIANCE.value
            else:
                res.estimates = estimate_all(sub, forest, estimators)
        out[label] = res
    return out


def post_stratify(estimates: Mapping[str, EffectEstimate], weights: PopulationWeights) -> EffectEstimate:
    """Population-weighted combination of subgroup estimates.

    The variance treats subgroup estimates as independent, which holds for
    disjoint groups under Bernoulli assignment.
    """
    w = weights.weights
    if set(w) != set(estimates):
        missing = sorted(set(w) ^ set(estimates), key=str)
        raise KeyError(f"subgroup labels do not match weights: {missing}")
    labels = sorted(w, key=str)
    ests = [estimates[k] for k in labels]
    ids = {e.estimator_id for e in ests}
    tau = math.fsum(w[k] * estimates[k].tau_hat for k in labels)
    var = math.fsum(w[k] ** 2 * estimates[k].var_hat for k in labels)
    return EffectEstimate(
        ids.pop() if len(ids) == 1 else "PostStratified",
        tau,
        var,
        sum(e.n for e in ests),
        sum(e.n1 for e in ests),
        sum(e.n0 for e in ests),
        ests[0].p,
    )


def decompose_bias(p1: float, pi1: float, tau1: float, tau2: float) -> float:
    """External bias of an internally unbiased estimate in a two-group population."""
    if not (0.0 <= p1 <= 1.0 and 0.0 <= pi1 <= 1.0):
        raise ValueError("proportions must lie in [0, 1]")
    return (p1 - pi1) * (tau1 - tau2)
