"""Test accuracy of the four training regimes at a common (epsilon, delta).

Every private regime uses the noise multiplier the accountant assigns to the
target budget, so the rows differ only in where the noise is added.
"""

import argparse
import csv
import tempfile
from pathlib import Path

import numpy as np

from xsilo.config import ExperimentConfig
from xsilo.dpnoise import DEFAULT_ACCOUNTANT
from xsilo.harness import run_experiment

REGIMES = ("nonprivate", "trusted", "dp_smc", "ldp")


def config(seed: int, regime: str, z: float, steps: int, batch: int, token_dir: Path) -> ExperimentConfig:
    return ExperimentConfig.from_dict(
        {
            "seed": seed,
            "parties": {"count": 10, "samples_per_party": 200},
            "protocol": {"kind": "pairwise"},
            "train": {
                "regime": regime,
                "steps": steps,
                "batch_size": batch,
                "lr": 1.0,
                "clip_norm": 1.0,
                "noise_multiplier": z,
                "eval_every": steps,
            },
            "dataset": {"kind": "gaussian_mixture", "n_features": 20, "n_classes": 2, "n_test": 2000},
            "mixnet": {"enabled": True, "pke": "x25519"},
            "token_list": str(token_dir / f"tokens-{seed}.xstl"),
        }
    )


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epsilons", type=float, nargs="+", default=[0.5, 1.0, 2.0, 4.0])
    ap.add_argument("--delta", type=float, default=1e-5)
    ap.add_argument("--steps", type=int, default=100)
    ap.add_argument("--batch", type=int, default=500)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("results/regime_ordering.csv"))
    args = ap.parse_args()
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp, args.out.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "regime", "noise_multiplier", "mean_accuracy", "std_accuracy"])
        for eps in args.epsilons:
            z = DEFAULT_ACCOUNTANT.noise_multiplier_for(eps, args.delta, args.steps)
            for regime in REGIMES:
                accs = [
                    run_experiment(config(s, regime, z, args.steps, args.batch, Path(tmp))).report.test_accuracy
                    for s in range(args.seeds)
                ]
                w.writerow([eps, regime, f"{z:.6g}", f"{np.mean(accs):.4f}", f"{np.std(accs):.4f}"])
                print(f"eps={eps} {regime:10s} acc={np.mean(accs):.4f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
