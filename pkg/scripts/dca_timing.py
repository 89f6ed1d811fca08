"""Wall-clock cost of one DCA round as the number of compute nodes grows.

Reports absolute seconds and the fold increase over the smallest node count.
"""

import argparse
import csv
from pathlib import Path

from xsilo.harness import time_dca


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clients", type=int, default=100)
    ap.add_argument("--nodes", type=int, nargs="+", default=list(range(2, 11)))
    ap.add_argument("--dims", type=int, nargs="+", default=[1_000, 10_000, 100_000])
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("results/dca_timing.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dim", "compute_nodes", "seconds", "fold_increase"])
        for dim in args.dims:
            times = time_dca(args.clients, args.nodes, dim, args.repeats)
            base = times[min(times)]
            for m, t in times.items():
                w.writerow([dim, m, f"{t:.6f}", f"{t / base:.3f}"])
                print(f"d={dim} M={m} {t:.4f}s x{t / base:.2f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
