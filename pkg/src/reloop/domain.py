"""Contrast data model, eligibility rules and the assignment-probability check."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp


class Reason(str, Enum):
    """Rejection codes attached to an ineligible contrast."""

    ZERO_OUTCOME_VARIANCE = "ZeroOutcomeVariance"
    ARM_TOO_SMALL = "ArmTooSmall"
    RANDOMIZATION_PROB_SUSPECT = "RandomizationProbSuspect"


@dataclass(frozen=True)
class UnitRecord:
    unit_id: object
    z: int
    y: float
    x: tuple = ()
    yhat_r: Optional[float] = None
    group: Optional[str] = None

    def __post_init__(self):
        if self.z not in (0, 1):
            raise ValueError(f"unit {self.unit_id!r}: z must be 0 or 1, got {self.z!r}")
        if not math.isfinite(self.y):
            raise ValueError(f"unit {self.unit_id!r}: outcome is not finite")
        if not all(math.isfinite(v) for v in self.x):
            raise ValueError(f"unit {self.unit_id!r}: non-finite covariate")
        if self.yhat_r is not None and not math.isfinite(self.yhat_r):
            raise ValueError(f"unit {self.unit_id!r}: non-finite remnant prediction")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ContrastDataset:
    """One randomized pairwise comparison, stored column-wise.

    ``x`` is an ``(n, k)`` covariate matrix, ``yhat_r`` the remnant prediction
    per unit (or ``None``), ``group`` an optional label array.
    """

    contrast_id: object
    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    yhat_r: Optional[np.ndarray] = None
    group: Optional[np.ndarray] = None
    unit_ids: Optional[np.ndarray] = None
    p: float = 0.5
    covariate_names: tuple = field(default=())

    def __post_init__(self):
        z = np.asarray(self.z)
        if z.ndim != 1:
            raise ValueError("z must be one-dimensional")
        if not np.isin(z, (0, 1)).all():
            raise ValueError(f"contrast {self.contrast_id!r}: z must be 0 or 1")
        n = z.shape[0]
        y = np.asarray(self.y, dtype=float)
        if y.shape != (n,):
            raise ValueError("y must have the same length as z")
        if not np.isfinite(y).all():
            raise ValueError(f"contrast {self.contrast_id!r}: non-finite outcome")
        x = np.asarray(self.x, dtype=float)
        if x.size == 0:
            x = np.zeros((n, 0))
        if x.ndim != 2 or x.shape[0] != n:
            raise ValueError("x must be an (n, k) matrix")
        if not np.isfinite(x).all():
            raise ValueError(f"contrast {self.contrast_id!r}: non-finite covariate")
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"assignment probability must lie in (0, 1), got {self.p}")
        object.__setattr__(self, "z", _frozen(z.astype(np.int8)))
        object.__setattr__(self, "y", _frozen(y.copy()))
        object.__setattr__(self, "x", _frozen(x.copy()))
        if self.yhat_r is not None:
            r = np.asarray(self.yhat_r, dtype=float)
            if r.shape != (n,) or not np.isfinite(r).all():
                raise ValueError("yhat_r must be n finite values")
            object.__setattr__(self, "yhat_r", _frozen(r.copy()))
        if self.group is not None:
            g = np.asarray(self.group, dtype=object)
            if g.shape != (n,):
                raise ValueError("group must have length n")
            object.__setattr__(self, "group", _frozen(g))
        ids = np.arange(n) if self.unit_ids is None else np.asarray(self.unit_ids, dtype=object)
        if ids.shape != (n,):
            raise ValueError("unit_ids must have length n")
        if len(set(ids.tolist())) != n:
            raise ValueError(f"contrast {self.contrast_id!r}: duplicate unit ids")
        object.__setattr__(self, "unit_ids", _frozen(ids))
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise ValueError("covariate_names must match the covariate count")
        object.__setattr__(self, "covariate_names", names)

    @classmethod
    def from_units(cls, contrast_id, units: Sequence[UnitRecord], p: float = 0.5):
        if not units:
            raise ValueError("a contrast needs at least one unit")
        k = len(units[0].x)
        if any(len(u.x) != k for u in units):
            raise ValueError("all units must share the covariate dimension")
        has_r = [u.yhat_r is not None for u in units]
        if any(has_r) and not all(has_r):
            raise ValueError("yhat_r must be present for all units or none")
        has_g = any(u.group is not None for u in units)
        return cls(
            contrast_id=contrast_id,
            z=np.array([u.z for u in units]),
            y=np.array([u.y for u in units], dtype=float),
            x=np.array([u.x for u in units], dtype=float).reshape(len(units), k),
            yhat_r=np.array([u.yhat_r for u in units], dtype=float) if all(has_r) else None,
            group=np.array([u.group for u in units], dtype=object) if has_g else None,
            unit_ids=np.array([u.unit_id for u in units], dtype=object),
            p=p,
        )

    @property
    def units(self) -> list[UnitRecord]:
        return [
            UnitRecord(
                unit_id=self.unit_ids[i],
                z=int(self.z[i]),
                y=float(self.y[i]),
                x=tuple(self.x[i].tolist()),
                yhat_r=None if self.yhat_r is None else float(self.yhat_r[i]),
                group=None if self.group is None else self.group[i],
            )
            for i in range(self.n)
        ]

    @property
    def n(self) -> int:
        return int(self.z.shape[0])

    @property
    def k(self) -> int:
        return int(self.x.shape[1])

    @property
    def n1(self) -> int:
        return int(self.z.sum())

    @property
    def n0(self) -> int:
        return self.n - self.n1

    def subset(self, mask) -> "ContrastDataset":
        """Restriction to the units selected by a boolean mask."""
        mask = np.asarray(mask, dtype=bool)
        return ContrastDataset(
            contrast_id=self.contrast_id,
            z=self.z[mask],
            y=self.y[mask],
            x=self.x[mask],
            yhat_r=None if self.yhat_r is None else self.yhat_r[mask],
            group=None if self.group is None else self.group[mask],
            unit_ids=self.unit_ids[mask],
            p=self.p,
            covariate_names=self.covariate_names,
        )

    def with_assignment(self, z, y) -> "ContrastDataset":
        """Same units and baseline data, new assignment and observed outcomes."""
        return ContrastDataset(
            contrast_id=self.contrast_id,
            z=z,
            y=y,
            x=self.x,
            yhat_r=self.yhat_r,
            group=self.group,
            unit_ids=self.unit_ids,
            p=self.p,
            covariate_names=self.covariate_names,
        )


@dataclass(frozen=True)
class ValidationVerdict:
    contrast_id: object
    eligible: bool
    reasons: tuple
    binom_p: float
    arm_sizes: tuple  # (n1, n0)


def default_min_per_arm(k: int) -> int:
    """At least five observations per parameter of a (k + 2)-parameter model, plus one."""
    return 5 * (k + 2) + 1


def binomial_test(n1: int, n: int, p0: float) -> float:
    """Central two-sided exact binomial p-value for ``n1`` successes in ``n`` trials.

    Doubles the smaller tail probability and caps at one. Tails are summed in
    log space so that extreme counts do not underflow before doubling.
    """
    if not 0.0 < p0 < 1.0:
        raise ValueError(f"p0 must lie in (0, 1), got {p0}")
    if n < 1 or not 0 <= n1 <= n:
        raise ValueError(f"need 0 <= n1 <= n and n >= 1, got n1={n1}, n={n}")
    ks = np.arange(n + 1)
    logpmf = (
        gammaln(n + 1) - gammaln(ks + 1) - gammaln(n - ks + 1)
        + ks * math.log(p0) + (n - ks) * math.log1p(-p0)
    )
    log_lower = logsumexp(logpmf[: n1 + 1])
    log_upper = logsumexp(logpmf[n1:])
    return float(min(1.0, 2.0 * math.exp(min(log_lower, log_upper))))


def validate_contrast(
    ds: ContrastDataset,
    min_per_arm: Optional[int] = None,
    binom_alpha: float = 0.1,
) -> ValidationVerdict:
    """Apply the exclusion rules: zero within-arm outcome variance, small arms,
    and an assignment count inconsistent with ``ds.p``."""
    if ds.n == 0:
        raise ValueError("cannot validate an empty contrast")
    if not 0.0 < binom_alpha < 1.0:
        raise ValueError("binom_alpha must lie in (0, 1)")
    if min_per_arm is None:
        min_per_arm = default_min_per_arm(ds.k)
    if min_per_arm < 1:
        raise ValueError("min_per_arm must be positive")

    n1, n0 = ds.n1, ds.n0
    reasons = []
    arms = [ds.y[ds.z == 1], ds.y[ds.z == 0]]
    if any(a.size == 0 or np.ptp(a) == 0.0 for a in arms):
        reasons.append(Reason.ZERO_OUTCOME_VARIANCE)
    if min(n1, n0) < min_per_arm:
        reasons.append(Reason.ARM_TOO_SMALL)
    binom_p = binomial_test(n1, ds.n, ds.p)
    if binom_p < binom_alpha:
        reasons.append(Reason.RANDOMIZATION_PROB_SUSPECT)
    return ValidationVerdict(
        contrast_id=ds.contrast_id,
        eligible=not reasons,
        reasons=tuple(reasons),
        binom_p=binom_p,
        arm_sizes=(n1, n0),
    )
