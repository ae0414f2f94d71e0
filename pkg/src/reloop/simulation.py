"""Synthetic finite populations with known potential outcomes.

Two oracles live here: exact moments of an estimator by enumerating every
Bernoulli assignment (small n), and Monte Carlo summaries at moderate n.

Random streams: every draw comes from PCG64 seeded through
``SeedSequence(seed, spawn_key=(stream, index))``. Population draws use
stream 0, the remnant sample stream 1, and replication ``r`` of a Monte Carlo
run uses stream 2 with index ``r``. Replications therefore do not depend on
how they are split across workers.
"""

from __future__ import annotations

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .domain import ContrastDataset
from .estimators import RELOOP, RELOOP_PLUS, TTEST, EffectEstimate, run_estimator
from .imputers import ForestParams
from .inference import variance_ratio
from .remnant import RemnantModel, predict_remnant, train_remnant
from .subgroups import PopulationWeights

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

STREAM_POPULATION = 0
STREAM_REMNANT = 1
STREAM_REPLICATION = 2
MAX_ENUMERATION_N = 14


def rng_for(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(stream, index))))


@dataclass(frozen=True)
class ScenarioSpec:
    """Parameters of a synthetic population, its remnant and the analysis to run.

    Outcome model: ``y0 = sum(x)/sqrt(k) + nonlinear * (x_k^2 - 1)/sqrt(2) + noise``
    and ``y1 = y0 + tau + tau_slope * x_1 + tau_group * [group == "G2"]``.
    When ``rho`` is set, the noise is orthogonalized against the covariates and
    the signal and scaled so that predictions from a model trained on an
    unshifted remnant correlate with ``y0`` at exactly ``rho``; otherwise
    ``noise_sd`` is used as is. ``remnant_shift`` moves every remnant
    covariate by that many standard deviations before the model is trained.
    """

    name: str = "custom"
    n: int = 200
    k: int = 3
    p: float = 0.5
    rho: Optional[float] = 0.7
    noise_sd: float = 1.0
    nonlinear: float = 0.7
    tau: float = 0.2
    tau_slope: float = 0.0
    tau_group: float = 0.0
    group_share: float = 0.5
    population_weights: Optional[dict] = None
    n_remnant: int = 5000
    remnant_shift: float = 0.0
    remnant_lambda: float = 1.0
    mode: str = "monte_carlo"
    replications: int = 1000
    estimators: tuple = (TTEST, RELOOP, RELOOP_PLUS)
    forest_trees: int = 100
    forest_min_leaf: int = 5
    alpha: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.k < 1:
            raise ValueError("need n >= 1 and k >= 1")
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.rho is not None and not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.noise_sd < 0 or self.n_remnant < self.k + 2:
            raise ValueError("invalid noise_sd or remnant size")
        if not 0.0 <= self.group_share <= 1.0:
            raise ValueError("group_share must lie in [0, 1]")
        if self.mode not in ("monte_carlo", "exact"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.population_weights is not None:
            PopulationWeights(self.population_weights)

    @property
    def forest(self) -> ForestParams:
        return ForestParams(n_trees=self.forest_trees, min_leaf=self.forest_min_leaf, seed=self.seed)


_SECTIONS = {
    "scenario": {"name", "seed", "mode"},
    "population": {"n", "k", "p", "rho", "noise_sd", "nonlinear", "tau", "tau_slope", "tau_group",
                   "group_share", "population_weights"},
    "remnant": {"n_remnant", "remnant_shift", "remnant_lambda"},
    "analysis": {"replications", "estimators", "forest_trees", "forest_min_leaf", "alpha"},
}


def scenario_from_dict(cfg: dict) -> ScenarioSpec:
    kw = {}
    for section, body in cfg.items():
        if section not in _SECTIONS:
            raise ValueError(f"unknown scenario section [{section}]")
        for key, value in body.items():
            if key not in _SECTIONS[section]:
                raise ValueError(f"unknown key {key!r} in [{section}]")
            kw[key] = value
    if kw.get("rho") == "none":
        kw["rho"] = None
    return ScenarioSpec(**kw)


def load_scenario(path) -> ScenarioSpec:
    with open(path, "rb") as fh:
        return scenario_from_dict(tomllib.load(fh))


def bundled_scenario(name: str) -> Path:
    path = Path(__file__).with_name("scenarios") / f"{name}.toml"
    if not path.exists():
        raise FileNotFoundError(f"no bundled scenario named {name!r}")
    return path


@dataclass(frozen=True)
class SyntheticPopulation:
    y0: np.ndarray
    y1: np.ndarray
    x: np.ndarray
    group: np.ndarray
    p: float
    yhat_r: Optional[np.ndarray] = None
    weights: Optional[PopulationWeights] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError("p must lie in (0, 1)")
        if self.y0.shape != self.y1.shape:
            raise ValueError("potential outcome vectors differ in length")

    @property
    def n(self) -> int:
        return int(self.y0.shape[0])

    @property
    def sate(self) -> float:
        return float(np.mean(self.y1 - self.y0))

    def group_sate(self, label) -> float:
        m = self.group == label
        return float(np.mean(self.y1[m] - self.y0[m]))

    def group_shares(self) -> dict:
        labels, counts = np.unique(self.group.astype(str), return_counts=True)
        return {str(g): c / self.n for g, c in zip(labels, counts)}

    @property
    def pate(self) -> Optional[float]:
        if self.weights is None:
            return None
        return math.fsum(w * self.group_sate(g) for g, w in self.weights.weights.items())

    def dataset(self, z=None, p: Optional[float] = None) -> ContrastDataset:
        z = np.zeros(self.n, np.int8) if z is None else np.asarray(z, np.int8)
        return ContrastDataset(
            contrast_id=self.meta.get("name", "synthetic"),
            z=z,
            y=np.where(z == 1, self.y1, self.y0),
            x=self.x,
            yhat_r=self.yhat_r,
            group=self.group,
            p=self.p if p is None else p,
        )


@dataclass(frozen=True)
class RemnantSample:
    x: np.ndarray
    y: np.ndarray
    model: RemnantModel


def _signal(x: np.ndarray, nonlinear: float) -> np.ndarray:
    k = x.shape[1]
    return x.sum(axis=1) / math.sqrt(k) + nonlinear * (x[:, -1] ** 2 - 1.0) / math.sqrt(2.0)


def _residualize(v: np.ndarray, basis: np.ndarray) -> np.ndarray:
    coef, *_ = np.linalg.lstsq(basis, v, rcond=None)
    return v - basis @ coef


def _calibrated_sigma(yhat, signal, rho):
    """Noise scale giving corr(yhat, signal + sigma * e) = rho for unit-sd e orthogonal to both."""
    c = np.cov(yhat, signal, bias=True)
    if c[0, 0] <= 0:
        raise ValueError("remnant predictions are constant; rho cannot be calibrated")
    r_max = c[0, 1] / math.sqrt(c[0, 0] * c[1, 1])
    if rho > r_max:
        raise ValueError(f"rho={rho} exceeds the achievable correlation {r_max:.3f}")
    return math.sqrt(c[0, 1] ** 2 / (rho**2 * c[0, 0]) - c[1, 1])


def gen_synthetic(spec: ScenarioSpec, seed: Optional[int] = None):
    """Draw a population and a remnant sample, train the remnant model and
    attach its predictions to the population. Deterministic per seed."""
    seed = spec.seed if seed is None else seed
    rng = rng_for(seed, STREAM_POPULATION)
    n, k = spec.n, spec.k
    x = rng.standard_normal((n, k))
    group = np.where(rng.random(n) < spec.group_share, "G1", "G2").astype(object)
    signal = _signal(x, spec.nonlinear)
    noise = rng.standard_normal(n)

    rrng = rng_for(seed, STREAM_REMNANT)
    # rho describes an unshifted remnant; a shift reuses the same draws moved by
    # remnant_shift, so it degrades the model without changing the population.
    xr0 = rrng.standard_normal((spec.n_remnant, k))
    noise_r = rrng.standard_normal(spec.n_remnant)
    names = tuple(f"x{j + 1}" for j in range(k))

    def fit(sigma, shift=0.0):
        xr = xr0 + shift
        yr = _signal(xr, spec.nonlinear) + sigma * noise_r
        return train_remnant(xr, yr, spec.remnant_lambda, names), xr, yr

    sigma = spec.noise_sd
    if spec.rho is not None:
        if n <= k + 2:
            raise ValueError("population too small to calibrate rho")
        # noise orthogonal to everything the predictions can see, scaled to unit sd
        e = _residualize(noise, np.column_stack([np.ones(n), x, signal]))
        e = e / e.std()
        noise = e
        # The remnant is noisier or cleaner along with the population, which moves
        # the fitted model slightly, so solve for sigma by fixed-point iteration.
        for _ in range(50):
            sigma_new = _calibrated_sigma(predict_remnant(fit(sigma)[0], x), signal, spec.rho)
            done = abs(sigma_new - sigma) <= 1e-13 * max(sigma_new, 1.0)
            sigma = sigma_new
            if done:
                break
    model, xr, yr = fit(sigma, spec.remnant_shift)
    yhat = predict_remnant(model, x)
    y0 = signal + sigma * noise
    effect = spec.tau + spec.tau_slope * x[:, 0] + spec.tau_group * (group == "G2")
    y1 = y0 + effect

    weights = PopulationWeights(spec.population_weights) if spec.population_weights else None
    pop = SyntheticPopulation(
        y0=y0,
        y1=y1,
        x=x,
        group=group,
        p=spec.p,
        yhat_r=yhat,
        weights=weights,
        meta={"name": spec.name, "rho": spec.rho, "noise_sd": sigma, "remnant_shift": spec.remnant_shift},
    )
    return pop, RemnantSample(xr, yr, model)


# ---------------------------------------------------------------- exact enumeration

@dataclass(frozen=True)
class ExactMoments:
    mean: float
    var: float
    mean_var_hat: float
    mass: float  # probability of the assignments that were enumerated
    n_assignments: int


Pipeline = Callable[[ContrastDataset], EffectEstimate]


def exact_expectation(
    pop: SyntheticPopulation,
    pipeline: Pipeline,
    p: Optional[float] = None,
    min_arm: int = 0,
    condition: Optional[Callable[[np.ndarray], bool]] = None,
) -> ExactMoments:
    """Exact moments of ``pipeline`` over all 2^n Bernoulli(p) assignments.

    Assignments with an arm smaller than ``min_arm`` (or failing
    ``condition``) are excluded and the remaining probabilities renormalized,
    giving conditional moments.
    """
    n = pop.n
    if n > MAX_ENUMERATION_N:
        raise ValueError(f"enumeration over 2^{n} assignments exceeds the n <= {MAX_ENUMERATION_N} budget")
    p = pop.p if p is None else p
    base = pop.dataset(p=p)
    bits = np.arange(n)
    taus, vars_, probs = [], [], []
    for code in range(1 << n):
        z = ((code >> bits) & 1).astype(np.int8)
        n1 = int(z.sum())
        if min(n1, n - n1) < min_arm or (condition is not None and not condition(z)):
            continue
        ds = base.with_assignment(z, np.where(z == 1, pop.y1, pop.y0))
        est = pipeline(ds)
        taus.append(est.tau_hat)
        vars_.append(est.var_hat)
        probs.append(p**n1 * (1 - p) ** (n - n1))
    if not probs:
        raise ValueError("no admissible assignments")
    w = np.asarray(probs)
    mass = math.fsum(w)
    w = w / mass
    t = np.asarray(taus)
    mean = math.fsum(w * t)
    var = math.fsum(w * (t - mean) ** 2)
    return ExactMoments(mean, var, math.fsum(w * np.asarray(vars_)), mass, len(probs))


# ---------------------------------------------------------------- Monte Carlo

def _replicate(pop: SyntheticPopulation, estimators, forest: ForestParams, seed: int, start: int, stop: int):
    tau = np.full((stop - start, len(estimators)), np.nan)
    var = np.full_like(tau, np.nan)
    base = pop.dataset()
    for r in range(start, stop):
        rng = rng_for(seed, STREAM_REPLICATION, r)
        z = (rng.random(pop.n) < pop.p).astype(np.int8)
        fseed = int(rng.integers(2**31))
        ds = base.with_assignment(z, np.where(z == 1, pop.y1, pop.y0))
        fp = dataclasses.replace(forest, seed=fseed)
        for j, eid in enumerate(estimators):
            try:
                est = run_estimator(ds, eid, fp, strict=False)
            except ValueError:
                continue
            tau[r - start, j] = est.tau_hat
            var[r - start, j] = est.var_hat
    return tau, var


@dataclass
class EstimatorSummary:
    estimator_id: str
    replications: int
    failures: int
    mean_estimate: float
    bias: float
    bias_mc_se: float
    empirical_variance: float
    mean_var_hat: float
    coverage: float
    coverage_mc_se: float
    ratio_empirical: Optional[float] = None  # baseline empirical variance / this one
    ratio_estimated: Optional[float] = None  # same with mean estimated variances


@dataclass
class MonteCarloSummary:
    sate: float
    pate: Optional[float]
    replications: int
    seed: int
    alpha: float
    baseline: str
    estimators: dict  # estimator_id -> EstimatorSummary
    tau: np.ndarray = field(repr=False)
    var: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "sate": self.sate,
            "pate": self.pate,
            "replications": self.replications,
            "seed": self.seed,
            "alpha": self.alpha,
            "baseline": self.baseline,
            "estimators": {k: dataclasses.asdict(v) for k, v in self.estimators.items()},
        }


def _summarize(eid, t, v, sate, alpha) -> EstimatorSummary:
    ok = np.isfinite(t) & np.isfinite(v)
    t, v = t[ok], v[ok]
    R = t.size
    if R == 0:
        nan = float("nan")
        return EstimatorSummary(eid, 0, int((~ok).sum()), nan, nan, nan, nan, nan, nan, nan)
    mean = float(t.mean())
    emp_var = float(t.var(ddof=1)) if R > 1 else float("nan")
    zq = norm.ppf(1 - alpha / 2)
    covered = np.abs(t - sate) <= zq * np.sqrt(v)
    cov = float(covered.mean())
    return EstimatorSummary(
        estimator_id=eid,
        replications=R,
        failures=int((~ok).sum()),
        mean_estimate=mean,
        bias=mean - sate,
        bias_mc_se=math.sqrt(emp_var / R) if R > 1 else float("nan"),
        empirical_variance=emp_var,
        mean_var_hat=float(v.mean()),
        coverage=cov,
        coverage_mc_se=math.sqrt(cov * (1 - cov) / R),
    )


def monte_carlo(
    pop: SyntheticPopulation,
    estimators: Sequence[str],
    replications: int,
    seed: int = 0,
    forest: ForestParams = ForestParams(n_trees=100),
    alpha: float = 0.05,
    baseline: str = TTEST,
    workers: int = 1,
) -> MonteCarloSummary:
    """Repeat Bernoulli assignment ``replications`` times and summarize each estimator."""
    if replications < 1:
        raise ValueError("replications must be >= 1")
    estimators = list(estimators)
    if workers <= 1:
        tau, var = _replicate(pop, estimators, forest, seed, 0, replications)
    else:
        bounds = np.linspace(0, replications, workers + 1).astype(int)
        with ProcessPoolExecutor(max_workers=workers) as ex:
            futs = [ex.submit(_replicate, pop, estimators, forest, seed, int(a), int(b))
                    for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
            parts = [f.result() for f in futs]
        tau = np.vstack([p[0] for p in parts])
        var = np.vstack([p[1] for p in parts])
    sate = pop.sate
    out = {eid: _summarize(eid, tau[:, j], var[:, j], sate, alpha) for j, eid in enumerate(estimators)}
    if baseline in out:
        b = out[baseline]
        for s in out.values():
            if s.empirical_variance > 0 and math.isfinite(b.empirical_variance):
                s.ratio_empirical = variance_ratio(b.empirical_variance, s.empirical_variance)
            if s.mean_var_hat > 0 and math.isfinite(b.mean_var_hat):
                s.ratio_estimated = variance_ratio(b.mean_var_hat, s.mean_var_hat)
    return MonteCarloSummary(sate, pop.pate, replications, seed, alpha, baseline, out, tau, var)


def run_scenario(spec: ScenarioSpec, seed: Optional[int] = None, workers: int = 1) -> dict:
    """Build the scenario's population and run its configured analysis."""
    seed = spec.seed if seed is None else seed
    spec = dataclasses.replace(spec, seed=seed)
    pop, remnant = gen_synthetic(spec, seed)
    out = {
        "scenario": dataclasses.asdict(spec),
        "population": {
            "n": pop.n,
            "sate": pop.sate,
            "pate": pop.pate,
            "group_shares": pop.group_shares(),
            "remnant_prediction_correlation": float(np.corrcoef(pop.yhat_r, pop.y0)[0, 1]),
            "noise_sd": pop.meta["noise_sd"],
        },
        "remnant_model": remnant.model.to_dict(),
    }
    forest = spec.forest
    if spec.mode == "exact":
        results = {}
        for eid in spec.estimators:
            min_arm = 2 if eid in (TTEST, "Rebar") else 0
            m = exact_expectation(pop, lambda ds, e=eid: run_estimator(ds, e, forest, strict=False),
                                  min_arm=min_arm)
            results[eid] = dataclasses.asdict(m) | {"bias": m.mean - pop.sate}
        out["exact"] = results
    else:
        summary = monte_carlo(pop, spec.estimators, spec.replications, seed, forest, spec.alpha,
                              workers=workers)
        out["monte_carlo"] = summary.to_dict()
    return out
