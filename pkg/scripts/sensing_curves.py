"""Variance during signal acquisition under local dephasing.

Compares the ideal GHZ and Dicke probes with the optimised N=40, C=1e4,
gamma/kappa=0.01 protocols from the tables, for several gamma_phi/J.

    python3 scripts/sensing_curves.py [--out out/sensing]
"""
import argparse
import json
from pathlib import Path

from cavsense import cli
from cavsense.protocol import DIVERGENT_VARIANCE

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="out/sensing")
ap.add_argument("--n-spins", type=int, default=40)
a = ap.parse_args()
out = Path(a.out)
out.mkdir(parents=True, exist_ok=True)

common = {"n_spins": a.n_spins, "gamma_phi_over_J": [0.0, 0.01, 0.1, 1.0], "t_max": 0.5, "n_t": 101}
jobs = {"ghz_ideal": {"probe": "ghz"}, "dicke_ideal": {"probe": "dicke"}}
for name in ("ghz", "dicke"):
    table = cli.load_table(name)
    for row in table["rows"]:
        if (row["n_spins"], row["cooperativity"], row["gamma_over_kappa"]) == (a.n_spins, 1e4, 0.01):
            jobs[f"{name}_protocol"] = {
                "probe": "protocol",
                "protocol": row["protocol"],
                "task": table["task"],
                "cooperativity": 1e4,
                "gamma_over_kappa": 0.01,
                "duration": table["duration"],
            }
for name, cfg in jobs.items():
    path = out / f"{name}.json"
    path.write_text(json.dumps({**common, **cfg}))
    code = cli.main(["sense", "--config", str(path), "--out", str(out / name)])
    for s in json.loads((out / name / "manifest.json").read_text())["results"].get("scenarios", []):
        v = s["initial_variance"]
        shown = "divergent" if v >= DIVERGENT_VARIANCE else f"{a.n_spins * v:.4g}"
        print(f"{name:16s} gamma_phi/J={s['gamma_phi_over_J']:<5g} N*var(t=0)={shown}  -> {s['file']}")
    if code:
        print(f"{name}: exit {code}")
