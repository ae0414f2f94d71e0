"""Write a synthetic batch of contrasts plus a remnant table as CSV.

    python scripts/make_demo_data.py --out-dir demo --contrasts 12 --seed 3

Produces demo/contrasts.csv (input for ``reloop analyze``), demo/remnant.csv
(training data for ``reloop remnant train``) and demo/weights.csv.
"""

import argparse
import csv
from pathlib import Path

import numpy as np


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out-dir", default="demo")
    ap.add_argument("--contrasts", type=int, default=12)
    ap.add_argument("--n", type=int, default=120)
    ap.add_argument("--n-remnant", type=int, default=3000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    beta = np.array([0.8, -0.5, 0.3])

    def outcome(x):
        return x @ beta + 0.4 * np.sin(2 * x[:, 0]) + rng.normal(0, 1, len(x))

    with open(out / "contrasts.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["contrast_id", "unit_id", "z", "y", "p", "group", "prior", "speed", "hints"])
        for c in range(args.contrasts):
            tau = rng.choice([0.0, 0.0, 0.25, 0.5])
            x = rng.normal(size=(args.n, 3))
            z = (rng.random(args.n) < 0.5).astype(int)
            y = outcome(x) + tau * z
            grp = np.where(x[:, 0] > 0.3, "A", "B")
            for i in range(args.n):
                hints = "" if rng.random() < 0.03 else f"{x[i, 2]:.6f}"
                w.writerow([f"C{c:02d}", f"u{c}-{i}", z[i], f"{y[i]:.6f}", 0.5, grp[i],
                            f"{x[i, 0]:.6f}", f"{x[i, 1]:.6f}", hints])

    with open(out / "remnant.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["prior", "speed", "hints", "y"])
        x = rng.normal(size=(args.n_remnant, 3))
        for row, yv in zip(x, outcome(x)):
            w.writerow([f"{v:.6f}" for v in row] + [f"{yv:.6f}"])

    (out / "weights.csv").write_text("group,pi\nA,0.4\nB,0.6\n")
    print(f"wrote {out}/contrasts.csv, remnant.csv, weights.csv")


if __name__ == "__main__":
    main()
