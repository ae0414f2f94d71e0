import itertools
import math

import numpy as np
import pytest

from reloop.estimators import diff_in_means
from reloop.imputers import ForestParams
from reloop.simulation import (
    MAX_ENUMERATION_N,
    ScenarioSpec,
    bundled_scenario,
    exact_expectation,
    gen_synthetic,
    load_scenario,
    monte_carlo,
    rng_for,
    run_scenario,
    scenario_from_dict,
)


def test_streams_are_reproducible_and_distinct():
    a = rng_for(5, 0).random(4)
    np.testing.assert_array_equal(a, rng_for(5, 0).random(4))
    assert not np.array_equal(a, rng_for(5, 1).random(4))
    assert not np.array_equal(rng_for(5, 2, 0).random(4), rng_for(5, 2, 1).random(4))


@pytest.mark.parametrize("rho,nonlinear", [(0.3, 0.7), (0.5, 0.7), (0.7, 0.7), (0.9, 0.0)])
def test_rho_is_hit_exactly(rho, nonlinear):
    pop, _ = gen_synthetic(ScenarioSpec(n=200, rho=rho, nonlinear=nonlinear, n_remnant=2000), seed=3)
    assert np.corrcoef(pop.yhat_r, pop.y0)[0, 1] == pytest.approx(rho, abs=1e-10)


def test_generation_is_deterministic():
    spec = ScenarioSpec(n=50, rho=0.5, n_remnant=500)
    a, ra = gen_synthetic(spec, 1)
    b, rb = gen_synthetic(spec, 1)
    np.testing.assert_array_equal(a.y0, b.y0)
    np.testing.assert_array_equal(a.yhat_r, b.yhat_r)
    assert ra.model == rb.model
    c, _ = gen_synthetic(spec, 2)
    assert not np.array_equal(a.y0, c.y0)


def test_shift_changes_the_model_not_the_population():
    base, _ = gen_synthetic(ScenarioSpec(n=200, n_remnant=3000), 4)
    moved, rem = gen_synthetic(ScenarioSpec(n=200, n_remnant=3000, remnant_shift=1.0), 4)
    np.testing.assert_array_equal(base.y0, moved.y0)
    assert rem.x.mean() == pytest.approx(1.0, abs=0.05)
    assert np.corrcoef(moved.yhat_r, moved.y0)[0, 1] < 0.7


def test_unreachable_rho_raises():
    with pytest.raises(ValueError, match="achievable"):
        gen_synthetic(ScenarioSpec(n=100, rho=0.99, nonlinear=3.0, n_remnant=500), 0)


def test_effect_model():
    spec = ScenarioSpec(n=300, tau=0.5, tau_slope=1.0, tau_group=2.0, n_remnant=500,
                        population_weights={"G1": 0.3, "G2": 0.7})
    pop, _ = gen_synthetic(spec, 0)
    g2 = pop.group == "G2"
    np.testing.assert_allclose(pop.y1 - pop.y0, 0.5 + pop.x[:, 0] + 2.0 * g2)
    assert pop.pate == pytest.approx(0.3 * pop.group_sate("G1") + 0.7 * pop.group_sate("G2"))


def test_scenario_config_parsing(tmp_path):
    for name in ("representative", "shifted_remnant", "exact_small"):
        spec = load_scenario(bundled_scenario(name))
        assert spec.name == name
    assert load_scenario(bundled_scenario("shifted_remnant")).remnant_shift == 1.0
    with pytest.raises(ValueError, match="section"):
        scenario_from_dict({"bogus": {}})
    with pytest.raises(ValueError, match="key"):
        scenario_from_dict({"population": {"nn": 3}})
    assert scenario_from_dict({"population": {"rho": "none"}}).rho is None
    with pytest.raises(FileNotFoundError):
        bundled_scenario("nope")
    path = tmp_path / "s.toml"
    path.write_text('[population]\nn = 12\n[analysis]\nestimators = ["TTest"]\n')
    assert load_scenario(path).estimators == ("TTest",)


def test_spec_validation():
    for bad in (dict(p=1.0), dict(rho=1.0), dict(mode="other"), dict(replications=0),
                dict(population_weights={"G1": 0.5})):
        with pytest.raises(ValueError):
            ScenarioSpec(**bad)


def test_exact_expectation_matches_direct_enumeration():
    pop, _ = gen_synthetic(ScenarioSpec(n=8, k=2, rho=0.6, n_remnant=300), 2)
    p = 0.4
    got = exact_expectation(pop, diff_in_means, p=p, min_arm=2)
    tot, m1, m2, mv = 0.0, 0.0, 0.0, 0.0
    for bits in itertools.product((0, 1), repeat=pop.n):
        z = np.array(bits)
        if min(z.sum(), pop.n - z.sum()) < 2:
            continue
        w = p ** z.sum() * (1 - p) ** (pop.n - z.sum())
        y = np.where(z == 1, pop.y1, pop.y0)
        t = y[z == 1].mean() - y[z == 0].mean()
        v = y[z == 1].var(ddof=1) / z.sum() + y[z == 0].var(ddof=1) / (pop.n - z.sum())
        tot += w
        m1 += w * t
        m2 += w * t * t
        mv += w * v
    assert got.mass == pytest.approx(tot, rel=1e-12)
    assert got.mean == pytest.approx(m1 / tot, rel=1e-10)
    assert got.var == pytest.approx(m2 / tot - (m1 / tot) ** 2, rel=1e-8)
    assert got.mean_var_hat == pytest.approx(mv / tot, rel=1e-10)


def test_exact_enumeration_budget():
    pop, _ = gen_synthetic(ScenarioSpec(n=MAX_ENUMERATION_N + 1, n_remnant=100), 0)
    with pytest.raises(ValueError, match="budget"):
        exact_expectation(pop, diff_in_means)


def test_monte_carlo_summary_and_worker_independence():
    pop, _ = gen_synthetic(ScenarioSpec(n=60, n_remnant=500), 1)
    fp = ForestParams(n_trees=10, seed=0)
    one = monte_carlo(pop, ["TTest", "ReLoop"], 40, seed=3, forest=fp)
    two = monte_carlo(pop, ["TTest", "ReLoop"], 40, seed=3, forest=fp, workers=2)
    np.testing.assert_array_equal(one.tau, two.tau)
    np.testing.assert_array_equal(one.var, two.var)
    s = one.estimators["ReLoop"]
    t, v = one.tau[:, 1], one.var[:, 1]
    assert s.bias == pytest.approx(t.mean() - pop.sate)
    assert s.empirical_variance == pytest.approx(t.var(ddof=1))
    cover = np.mean(np.abs(t - pop.sate) <= 1.959963984540054 * np.sqrt(v))
    assert s.coverage == pytest.approx(cover)
    assert s.ratio_empirical == pytest.approx(one.estimators["TTest"].empirical_variance / t.var(ddof=1))
    assert one.estimators["TTest"].ratio_empirical == 1.0


def test_run_scenario_exact_mode_is_unbiased():
    spec = ScenarioSpec(n=8, k=2, rho=0.6, n_remnant=300, mode="exact", estimators=("Loop_x", "ReLoop"),
                        forest_trees=10)
    out = run_scenario(spec, seed=5)
    for eid in ("Loop_x", "ReLoop"):
        assert abs(out["exact"][eid]["bias"]) < 1e-12
        assert out["exact"][eid]["mass"] == 1.0


def test_failures_are_counted_not_raised():
    pop, _ = gen_synthetic(ScenarioSpec(n=6, k=1, n_remnant=100, p=0.2), 0)
    mc = monte_carlo(pop, ["TTest"], 50, seed=0)
    s = mc.estimators["TTest"]
    assert s.failures > 0 and s.replications + s.failures == 50
    assert math.isfinite(s.bias)
