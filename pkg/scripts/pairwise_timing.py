"""Per-client pairwise mask generation time as the federation grows.

With a fixed group size each client masks against a bounded set of peers, so
the per-client cost should stay flat; without groups it grows with N.
"""

import argparse
import csv
from pathlib import Path

from xsilo.harness import time_pairwise_masks


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--clients", type=int, nargs="+", default=[10, 20, 40, 80, 160])
    ap.add_argument("--group-size", type=int, default=10)
    ap.add_argument("--dim", type=int, default=10_000)
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--out", type=Path, default=Path("results/pairwise_timing.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with args.out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["grouping", "clients", "seconds_per_client"])
        for label, group in (("grouped", args.group_size), ("ungrouped", None)):
            for n, t in time_pairwise_masks(args.clients, group, args.dim, args.repeats).items():
                w.writerow([label, n, f"{t:.6f}"])
                print(f"{label:9s} N={n} {1e3 * t:.3f} ms/client")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
