"""Baseline remnant model: standardized ridge regression with a JSON file format.

Any model trained outside the RCT can stand in here; downstream estimators
only consume its predictions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

FORMAT = "reloop.remnant-model"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class RemnantModel:
    coefficients: tuple  # intercept first, then one per standardized feature
    lam: float
    means: tuple
    scales: tuple
    feature_names: tuple

    def __post_init__(self):
        k = len(self.means)
        if len(self.coefficients) != k + 1 or len(self.scales) != k or len(self.feature_names) != k:
            raise ValueError("coefficient count must equal feature count + 1")
        if any(not s > 0 for s in self.scales):
            raise ValueError("feature scales must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")

    @property
    def k(self) -> int:
        return len(self.means)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "feature_names": list(self.feature_names),
            "lambda": self.lam,
            "means": list(self.means),
            "scales": list(self.scales),
            "coefficients": list(self.coefficients),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RemnantModel":
        if d.get("format") != FORMAT:
            raise ValueError("not a remnant model document")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported remnant model version {d.get('version')!r}")
        return cls(
            coefficients=tuple(float(c) for c in d["coefficients"]),
            lam=float(d["lambda"]),
            means=tuple(float(v) for v in d["means"]),
            scales=tuple(float(v) for v in d["scales"]),
            feature_names=tuple(d["feature_names"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "RemnantModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def train_remnant(
    features,
    outcomes,
    lam: float = 0.0,
    feature_names: Optional[Sequence[str]] = None,
) -> RemnantModel:
    X = np.asarray(features, dtype=float)
    y = np.asarray(outcomes, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValueError("features must be (n, k) and outcomes length n")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n, k = X.shape
    if n == 0:
        raise ValueError("no remnant rows")
    if lam == 0 and n < k + 2:
        raise ValueError(f"need at least k + 2 = {k + 2} rows without a penalty")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("remnant data must be finite")
    # canonical row order: the fit is then bit-identical under row permutations
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    X, y = X[order], y[order]

    means = X.mean(axis=0)
    scales = X.std(axis=0)
    scales[scales == 0] = 1.0
    Xs = (X - means) / scales
    ybar = y.mean()
    gram = Xs.T @ Xs + lam * np.eye(k)
    if lam == 0 and np.linalg.matrix_rank(Xs) < k:
        raise np.linalg.LinAlgError("singular remnant design with lambda = 0")
    beta = np.linalg.solve(gram, Xs.T @ (y - ybar)) if k else np.zeros(0)
    names = tuple(feature_names) if feature_names is not None else tuple(f"x{j + 1}" for j in range(k))
    return RemnantModel(
        coefficients=(float(ybar), *map(float, beta)),
        lam=float(lam),
        means=tuple(map(float, means)),
        scales=tuple(map(float, scales)),
        feature_names=names,
    )


def predict_remnant(model: RemnantModel, features) -> np.ndarray:
    X = np.asarray(features, dtype=float)
    if X.ndim == 1:
        X = X[:, None] if model.k == 1 else X[None, :]
    if X.shape[1] != model.k:
        raise ValueError(f"feature width {X.shape[1]} does not match the model's {model.k}")
    coef = np.asarray(model.coefficients)
    Xs = (X - np.asarray(model.means)) / np.asarray(model.scales)
    return coef[0] + Xs @ coef[1:]
