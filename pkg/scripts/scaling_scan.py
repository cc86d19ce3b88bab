"""Optimal N*(dbeta)^2 for N in {10, 20, 40} and the fitted exponent alpha.

Runs the parity scan at C = 25 and 100 and the Jz^2 scan (three steps) at
C = 100, each with two continuation passes across the grid.

    python3 scripts/scaling_scan.py [--out out/scaling] [--restarts K] [--threads T]
"""
import argparse
import json
from pathlib import Path

from cavsense import cli

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="out/scaling")
ap.add_argument("--restarts", type=int, default=20, help="minimum restarts per point (at least N are used)")
ap.add_argument("--threads", type=int, default=1)
ap.add_argument("--seed", type=int, default=0)
a = ap.parse_args()

base = {"n_spins": [10, 20, 40], "gamma_over_kappa": [1.0], "continuation": 2, "optimizer": {"n_restarts": a.restarts}}
runs = {
    "parity": {**base, "cooperativity": [25, 100], "task": "parity", "steps": 1},
    "jz2": {**base, "cooperativity": [100], "task": "jz2", "steps": 3},
}
out = Path(a.out)
out.mkdir(parents=True, exist_ok=True)
for name, cfg in runs.items():
    path = out / f"{name}.json"
    path.write_text(json.dumps(cfg))
    cli.main(["optimize", "--config", str(path), "--out", str(out / name), "--seed", str(a.seed), "--threads", str(a.threads)])
    print((out / name / "scan.csv").read_text())
    for e in json.loads((out / name / "manifest.json").read_text())["results"]["exponents"]:
        print(f"{name}: C={e['C']:g} alpha={e['alpha']:.3f}")
