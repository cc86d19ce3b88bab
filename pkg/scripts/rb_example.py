"""Rb-87 in a high-finesse micro-cavity: derive C and gamma/kappa, then optimise N=10 probes.

    python3 scripts/rb_example.py [--duration 40] [--restarts 20]
"""
import argparse
import math

from cavsense.channel import cavity_params_from_geometry, rates_from_cooperativity
from cavsense.dicke import CollectiveBasis
from cavsense.optimizer import OptimizerConfig, multi_start
from cavsense.protocol import JZ2, PARITY

ap = argparse.ArgumentParser()
ap.add_argument("--duration", type=float, default=40.0, help="gT of each pulse; 0 for the adiabatic limit")
ap.add_argument("--restarts", type=int, default=20)
ap.add_argument("--n-spins", type=int, default=10)
a = ap.parse_args()

gamma = 2 * math.pi * 6e6
# 780 nm, finesse 2e5, 2 um waist, 40 um length
C, g, kappa = cavity_params_from_geometry(780e-9, 2e5, 2e-6, 40e-6, gamma)
print(f"C = {C:.0f}, g/2pi = {g / 2e6 / math.pi:.0f} MHz, kappa/2pi = {kappa / 2e6 / math.pi:.1f} MHz, gamma/kappa = {gamma / kappa:.3f}")
rates = rates_from_cooperativity(C, gamma / kappa)
cfg = OptimizerConfig(n_restarts=a.restarts, duration=a.duration or None)
b = CollectiveBasis(a.n_spins)
for label, task, P in (("GHZ-like (parity, P=1)", PARITY, 1), ("Dicke-like (Jz^2, P=3)", JZ2, 3)):
    rep = multi_start(b, task, rates, P, cfg)
    print(f"{label}: (dbeta)^2 = {rep.best_variance:.4f}, N*(dbeta)^2 = {a.n_spins * rep.best_variance:.4f}")
    print("  ", rep.best_params.to_json())
