"""Re-evaluate both tabulated protocol tables and print one line per row.

    python3 scripts/table_regression.py [--out out/regression]
"""
import argparse
import sys

from cavsense import cli

ap = argparse.ArgumentParser()
ap.add_argument("--out", default="out/regression")
a = ap.parse_args()
sys.exit(cli.main(["evaluate", "--table", "all", "--out", a.out]))
