"""Run a bundled or custom scenario and print the headline numbers.

    python scripts/run_scenario.py representative --replications 2000
    python scripts/run_scenario.py path/to/scenario.toml --json out.json
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

from reloop.simulation import bundled_scenario, load_scenario, run_scenario


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario", nargs="?", default="representative")
    ap.add_argument("--replications", type=int)
    ap.add_argument("--seed", type=int)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--json", help="also write the full summary here")
    args = ap.parse_args()

    path = Path(args.scenario)
    spec = load_scenario(path if path.exists() else bundled_scenario(args.scenario))
    if args.replications:
        spec = dataclasses.replace(spec, replications=args.replications)
    t0 = time.perf_counter()
    out = run_scenario(spec, args.seed, workers=args.workers)
    elapsed = time.perf_counter() - t0

    pop = out["population"]
    print(f"{spec.name}: n={pop['n']} corr(yhat_r, y0)={pop['remnant_prediction_correlation']:.3f} ({elapsed:.1f}s)")
    if "monte_carlo" in out:
        mc = out["monte_carlo"]
        print(f"{'estimator':<12}{'bias':>10}{'mc se':>9}{'var':>10}{'E[v_hat]':>10}{'cover':>8}{'ratio':>8}")
        for eid, s in mc["estimators"].items():
            print(f"{eid:<12}{s['bias']:>10.4f}{s['bias_mc_se']:>9.4f}{s['empirical_variance']:>10.5f}"
                  f"{s['mean_var_hat']:>10.5f}{s['coverage']:>8.3f}{s['ratio_empirical']:>8.3f}")
    else:
        for eid, s in out["exact"].items():
            print(f"{eid:<12} E[tau]-sate={s['bias']: .2e}  Var={s['var']:.5f}  E[v_hat]={s['mean_var_hat']:.5f}"
                  f"  mass={s['mass']:.4f}")
    if args.json:
        Path(args.json).write_text(json.dumps(out, indent=2) + "\n")


if __name__ == "__main__":
    main()
