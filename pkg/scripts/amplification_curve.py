"""Effective sampling fraction of honest samples under SWOR vs Poisson sampling.

Writes one CSV row per (adversary fraction, delta slack) pair.
"""

import argparse
from pathlib import Path

import numpy as np

from xsilo.sampling import amplification_curve, curve_to_csv


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=10_000, help="total number of samples")
    ap.add_argument("--b", type=int, default=100, help="batch size")
    ap.add_argument("--out", type=Path, default=Path("results/amplification.csv"))
    args = ap.parse_args()
    slacks = [0.0, 1e-9, 1e-6, 1e-3]
    advs = [float(a) for a in np.round(np.linspace(0.0, 0.95, 20), 4)]
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(curve_to_csv(amplification_curve(args.n, args.b, slacks, advs)))
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
