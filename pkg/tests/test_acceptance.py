"""Acceptance criteria, each run at its stated tolerance.

A one-line PASS/FAIL per criterion is printed in the terminal summary.
The Monte Carlo criteria take several minutes each on one core.
"""

import csv
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from helpers import explicit_loo_ols
from reloop import imputers
from reloop.domain import ContrastDataset, Reason, default_min_per_arm, validate_contrast
from reloop.estimators import diff_in_means, loop_point, rebar
from reloop.imputers import (
    ForestParams,
    impute_ensemble,
    impute_fixed_remnant,
    impute_loo_forest,
    impute_loo_ols,
    impute_zero,
)
from reloop.inference import bh_adjust, by_adjust, harmonic, variance_ratio
from reloop.simulation import ScenarioSpec, bundled_scenario, exact_expectation, gen_synthetic, load_scenario, run_scenario
from reloop.subgroups import PopulationWeights, post_stratify

# ---------------------------------------------------------------- exact enumeration

EXACT_FOREST = ForestParams(n_trees=20, seed=0)
PIPELINES = {
    "zero": lambda ds: loop_point(ds, impute_zero(ds)),
    "fixed_remnant": lambda ds: loop_point(ds, impute_fixed_remnant(ds)),
    "loo_ols": lambda ds: loop_point(ds, impute_loo_ols(ds, strict=False)),
    "loo_forest": lambda ds: loop_point(ds, impute_loo_forest(ds, EXACT_FOREST, strict=False)),
    "ensemble": lambda ds: loop_point(ds, impute_ensemble(ds, EXACT_FOREST, strict=False)),
}


def random_population(seed):
    rng = np.random.default_rng([seed, 99])
    spec = ScenarioSpec(
        n=10,
        k=2,
        rho=None,
        noise_sd=float(rng.uniform(0.3, 2.0)),
        nonlinear=float(rng.uniform(0, 1.5)),
        tau=float(rng.normal(0, 1)),
        tau_slope=float(rng.normal(0, 1)),
        n_remnant=200,
    )
    return gen_synthetic(spec, seed)[0]


@pytest.fixture(scope="module")
def enumerations():
    t0 = time.perf_counter()
    rows = []
    for seed in range(20):
        pop = random_population(seed)
        for p in (0.3, 0.5):
            for name, fn in PIPELINES.items():
                m = exact_expectation(pop, fn, p=p)
                assert m.mass == pytest.approx(1.0) and m.n_assignments == 1024
                rows.append((seed, p, name, pop.sate, m))
    return rows, time.perf_counter() - t0


@pytest.mark.criterion("exact unbiasedness (20 populations, n=10, p in {0.3, 0.5}, 5 imputers)")
def test_exact_unbiasedness(enumerations, detail):
    rows, elapsed = enumerations
    worst = max(abs(m.mean - sate) / max(1.0, abs(sate)) for _, _, _, sate, m in rows)
    detail(f"max |E[tau]-sate|/max(1,|sate|) = {worst:.2e}, enumeration time {elapsed:.0f}s")
    assert worst <= 1e-9
    assert elapsed < 300


@pytest.mark.criterion("exact conservativeness (zero and fixed-remnant imputers)")
@pytest.mark.xfail(strict=True, reason="finite-sample shortfall from the cross term; see the decisions ledger")
def test_exact_conservativeness(enumerations, detail):
    rows, _ = enumerations
    gaps = [(m.mean_var_hat - m.var, seed, p, name) for seed, p, name, _, m in rows
            if name in ("zero", "fixed_remnant")]
    short = [g for g in gaps if g[0] < -1e-12]
    worst = min(gaps)
    detail(f"{len(short)}/{len(gaps)} cases with E[v]-Var < -1e-12; worst {worst[0]:.4f} "
           f"(population {worst[1]}, p={worst[2]}, {worst[3]})")
    assert not short


# ---------------------------------------------------------------- identities and oracles

@pytest.mark.criterion("identity checks: Loop(m=0) == TTest, Loop(m=yhat_r) == rebar at expected arm sizes")
def test_identities(detail):
    rng = np.random.default_rng(2024)
    worst = 0.0
    cases = 0
    for n, p in ((10, 0.5), (20, 0.3), (40, 0.25), (50, 0.6), (200, 0.5)):
        for _ in range(40):
            n1 = round(n * p)
            z = np.zeros(n, int)
            z[rng.choice(n, n1, replace=False)] = 1
            y = rng.normal(0, 3, n) + z
            ds = ContrastDataset("c", z, y, np.zeros((n, 0)), yhat_r=y + rng.normal(0, 1, n), p=p)
            worst = max(
                worst,
                abs(loop_point(ds, impute_zero(ds)).tau_hat - diff_in_means(ds).tau_hat),
                abs(loop_point(ds, impute_fixed_remnant(ds)).tau_hat - rebar(ds).tau_hat),
            )
            cases += 1
    detail(f"{cases} datasets, max abs difference {worst:.1e}")
    assert worst <= 1e-12


@pytest.mark.criterion("LOO-OLS oracle equivalence (50 datasets of 20 units)")
def test_loo_ols_oracle(detail, monkeypatch):
    rng = np.random.default_rng(77)
    datasets = []
    for _ in range(50):
        n = 20
        z = (rng.random(n) < 0.5).astype(int)
        while min(z.sum(), n - z.sum()) < 3:
            z = (rng.random(n) < 0.5).astype(int)
        r = rng.normal(0, 2, n)
        datasets.append(ContrastDataset("c", z, r * 0.8 + rng.normal(0, 1, n), np.zeros((n, 0)), yhat_r=r))

    def worst_gap():
        w = 0.0
        for ds in datasets:
            imp = impute_loo_ols(ds)
            for arm, got in ((0, imp.yhat0), (1, imp.yhat1)):
                w = max(w, np.max(np.abs(got - explicit_loo_ols(ds.yhat_r, ds.y, ds.z == arm))))
        return w

    default = worst_gap()
    monkeypatch.setattr(imputers, "EXPLICIT_LOO_MAX", 0)  # force the leverage identity everywhere
    leverage = worst_gap()
    detail(f"max |loo - refit|: leverage path {leverage:.1e}, default path {default:.1e}")
    assert leverage <= 1e-8 and default <= 1e-8


# ---------------------------------------------------------------- Monte Carlo

def _run_bundled(name):
    spec = load_scenario(bundled_scenario(name))
    t0 = time.perf_counter()
    out = run_scenario(spec)
    return out, time.perf_counter() - t0


@pytest.fixture(scope="module")
def representative():
    return _run_bundled("representative")


@pytest.mark.slow
@pytest.mark.criterion("synthetic precision gain (n=200, rho=0.7, R=20000)")
def test_precision_gain(representative, detail):
    out, elapsed = representative
    mc = out["monte_carlo"]
    assert mc["replications"] == 20000
    est = mc["estimators"]
    r_loop = est["ReLoop"]["ratio_empirical"]
    r_plus = est["ReLoopPlus"]["ratio_empirical"]
    rho = out["scenario"]["rho"]
    target = 1.0 / (1.0 - rho**2)
    detail(f"corr={out['population']['remnant_prediction_correlation']:.4f}, ReLoop ratio {r_loop:.3f} "
           f"(target {target:.2f} +/- 15%), ReLoopPlus {r_plus:.3f}, runtime {elapsed:.0f}s")
    assert abs(r_loop / target - 1.0) <= 0.15
    assert r_plus >= r_loop - 0.05
    assert elapsed < 600


@pytest.mark.slow
@pytest.mark.criterion("conservative coverage (same Monte Carlo)")
def test_coverage(representative, detail):
    est = representative[0]["monte_carlo"]["estimators"]
    parts = []
    ok = True
    for eid in ("ReLoop", "ReLoopPlus"):
        s = est[eid]
        floor = 0.95 - 3 * s["coverage_mc_se"]
        parts.append(f"{eid} {s['coverage']:.4f} (floor {floor:.4f})")
        ok &= s["coverage"] >= floor
    detail(", ".join(parts))
    assert ok


@pytest.mark.slow
@pytest.mark.criterion("unrepresentative remnant robustness (covariates shifted by 1 SD)")
def test_shifted_remnant(detail):
    out, elapsed = _run_bundled("shifted_remnant")
    est = out["monte_carlo"]["estimators"]
    s = est["ReLoopPlus"]
    detail(f"ReLoopPlus bias {s['bias']:.5f} (3 MC-SE {3 * s['bias_mc_se']:.5f}), ratio vs TTest "
           f"{s['ratio_empirical']:.3f}, corr={out['population']['remnant_prediction_correlation']:.3f}, "
           f"runtime {elapsed:.0f}s")
    assert abs(s["bias"]) <= 3 * s["bias_mc_se"]
    assert s["ratio_empirical"] >= 1.0 - 0.05


# ---------------------------------------------------------------- FDR

def _brute(p, alpha, c):
    m = len(p)
    order = sorted(range(m), key=lambda i: (p[i], i))
    k = max([j for j in range(1, m + 1) if p[order[j - 1]] * (m * c) / j <= alpha], default=0)
    rej = [False] * m
    for i in order[:k]:
        rej[i] = True
    q = [min(1.0, min(p[order[j]] * (m * c) / (j + 1) for j in range(r, m))) for r in range(m)]
    adj = [0.0] * m
    for r, i in enumerate(order):
        adj[i] = q[r]
    return rej, adj


@pytest.mark.criterion("FDR oracle (1000 brute-force vectors; global null m=227, 5000 reps)")
def test_fdr(detail):
    rng = np.random.default_rng(31)
    mismatches = 0
    for _ in range(1000):
        m = int(rng.integers(1, 51))
        p = rng.random(m) ** rng.uniform(0.5, 4)  # skew toward small p-values
        if rng.random() < 0.2:
            p[rng.integers(m)] = p[0]  # ties
        p = p.tolist()
        for fn, c in ((bh_adjust, 1.0), (by_adjust, harmonic(m))):
            alpha = 0.05
            res = fn(p, alpha)
            rej, adj = _brute(p, alpha, c)
            mismatches += res.rejected.tolist() != rej or res.adjusted.tolist() != adj

    reps, m = 5000, 227
    any_bh = np.empty(reps, bool)
    any_by = np.empty(reps, bool)
    for r in range(reps):
        p = rng.random(m)
        any_bh[r] = bh_adjust(p, 0.05).n_rejected > 0
        any_by[r] = by_adjust(p, 0.05).n_rejected > 0
    fdr_bh, fdr_by = any_bh.mean(), any_by.mean()
    se_bh = math.sqrt(fdr_bh * (1 - fdr_bh) / reps)
    detail(f"{mismatches} mismatches; null FDR BH {fdr_bh:.4f} (limit {0.05 + 3 * se_bh:.4f}), BY {fdr_by:.4f}")
    assert mismatches == 0
    assert fdr_bh <= 0.05 + 3 * se_bh
    assert fdr_by <= 0.05 + 3 * math.sqrt(max(fdr_by * (1 - fdr_by), 1e-12) / reps)


# ---------------------------------------------------------------- post-stratification

@pytest.mark.criterion("post-stratification identity (20 datasets)")
def test_post_stratification_identity(detail):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 5])
        n = int(rng.integers(30, 200))
        groups = rng.choice(["a", "b", "c", "d"][: int(rng.integers(2, 5))], n)
        y0 = rng.normal(0, 2, n)
        y1 = y0 + rng.normal(1, 1, n) * (1 + (groups == "a"))
        labels = sorted(set(groups.tolist()))
        ests = {}
        for g in labels:
            m = groups == g
            k = int(m.sum())
            # every unit observed under both conditions: the full partition of the potential outcomes
            full = ContrastDataset(g, np.r_[np.ones(k, int), np.zeros(k, int)], np.r_[y1[m], y0[m]],
                                   np.zeros((2 * k, 0)))
            ests[g] = diff_in_means(full)
        shares = PopulationWeights({g: float(np.mean(groups == g)) for g in labels})
        worst = max(worst, abs(post_stratify(ests, shares).tau_hat - float(np.mean(y1 - y0))))
    detail(f"max |sum p_k sate_k - sate| = {worst:.1e}")
    assert worst <= 1e-12


# ---------------------------------------------------------------- validation gates

@pytest.mark.criterion("validation gates produce the specified rejection reasons")
def test_validation_gates(detail):
    rng = np.random.default_rng(8)
    k = 2
    floor = default_min_per_arm(k)

    def contrast(n1, n0, y=None):
        z = np.r_[np.ones(n1, int), np.zeros(n0, int)]
        y = rng.standard_normal(n1 + n0) if y is None else y
        return ContrastDataset("c", z, y, rng.standard_normal((n1 + n0, k)))

    y_const = np.r_[np.full(40, 2.0), rng.standard_normal(40)]
    # 33 of 80 treated: two-sided binomial p about 0.14; 31 of 80: about 0.057
    cases = {
        "clean": (contrast(40, 40), ()),
        "zero variance": (contrast(40, 40, y_const), (Reason.ZERO_OUTCOME_VARIANCE,)),
        "arm at floor": (contrast(floor, floor), ()),
        "arm below floor": (contrast(floor - 1, floor - 1), (Reason.ARM_TOO_SMALL,)),
        "binomial ok": (contrast(33, 47), ()),
        "binomial suspect": (contrast(31, 49), (Reason.RANDOMIZATION_PROB_SUSPECT,)),
    }
    got = {name: validate_contrast(ds).reasons for name, (ds, _) in cases.items()}
    wrong = [name for name, (_, want) in cases.items() if got[name] != want]
    detail(f"{len(cases) - len(wrong)}/{len(cases)} fixtures match" + (f"; wrong: {wrong}" if wrong else ""))
    assert not wrong


# ---------------------------------------------------------------- determinism

def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "reloop.cli", *map(str, args)], capture_output=True)
    assert proc.returncode == 0, proc.stderr.decode()
    return proc.stdout


@pytest.mark.criterion("CLI determinism (byte-identical repeats, independent of workers)")
def test_cli_determinism(tmp_path, detail):
    rng = np.random.default_rng(4)
    contrasts = tmp_path / "contrasts.csv"
    with open(contrasts, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["contrast_id", "unit_id", "z", "y", "group", "prior", "speed"])
        for c in range(5):
            x = rng.standard_normal((70, 2))
            z = (rng.random(70) < 0.5).astype(int)
            y = x @ [1.0, -0.5] + 0.3 * z + rng.standard_normal(70)
            for i in range(70):
                w.writerow([f"C{c}", f"u{i}", z[i], float(y[i]), "A" if x[i, 0] > 0 else "B",
                            float(x[i, 0]), "" if i % 23 == 5 else float(x[i, 1])])
    remnant = tmp_path / "remnant.csv"
    with open(remnant, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prior", "speed", "y"])
        x = rng.standard_normal((400, 2))
        for row, yv in zip(x, x @ [1.0, -0.5] + rng.standard_normal(400)):
            w.writerow([float(row[0]), float(row[1]), float(yv)])
    weights = tmp_path / "weights.csv"
    weights.write_text("group,pi\nA,0.3\nB,0.7\n")
    scenario = tmp_path / "s.toml"
    scenario.write_text('[population]\nn = 60\nrho = 0.5\n[remnant]\nn_remnant = 400\n'
                        '[analysis]\nreplications = 24\nestimators = ["TTest", "ReLoop", "ReLoopPlus"]\n'
                        'forest_trees = 10\n')
    model = tmp_path / "model.json"
    model.write_bytes(_cli("remnant", "train", "--input", remnant, "--lambda", "0.3"))

    est = ["--remnant-model", model, "--trees", "25", "--seed", "13", "--min-arm", "5"]
    commands = {
        "validate": (["validate", "--input", contrasts, "--seed", "13"], False),
        "analyze": (["analyze", "--input", contrasts, *est], True),
        "subgroup": (["subgroup", "--input", contrasts, "--covariates", "prior,yhat_r", *est], True),
        "poststratify": (["poststratify", "--input", contrasts, "--weights", weights, *est], True),
        "simulate": (["simulate", "--scenario", scenario, "--seed", "13"], True),
        "remnant train": (["remnant", "train", "--input", remnant, "--lambda", "0.3"], False),
        "remnant predict": (["remnant", "predict", "--input", contrasts, "--remnant-model", model], False),
    }
    differing = []
    for name, (argv, parallel) in commands.items():
        outs = [_cli(*argv), _cli(*argv)]
        if parallel:
            outs.append(_cli(*argv, "--workers", "2"))
        if any(o != outs[0] for o in outs) or not outs[0]:
            differing.append(name)
    detail(f"{len(commands) - len(differing)}/{len(commands)} commands byte-identical"
           + (f"; differing: {differing}" if differing else ""))
    assert not differing
