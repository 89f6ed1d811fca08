"""Command-line entry point: ``xsilo <subcommand>``.

Log verbosity comes from ``XSILO_LOG`` (``DEBUG``, ``INFO``, ``WARNING``...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import load_config
from .harness import generate_token_list, run_experiment
from .mixnet import write_token_list
from .projection import solve_sensitivity
from .sampling import amplification_curve, curve_to_csv


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    res = run_experiment(cfg, args.out)
    summary = {k: res.result.get(k) for k in ("status", "privacy")}
    if res.report is not None:
        summary["test_accuracy"] = res.report.test_accuracy
    summary["result"] = str(res.paths["result"])
    print(json.dumps(summary, indent=2))
    return 0 if res.result["status"] == "ok" else 2


def cmd_amplification(args) -> int:
    rows = amplification_curve(args.n, args.b, _floats(args.slacks), _floats(args.adv_fracs))
    text = curve_to_csv(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "amplification.csv").write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_sensitivity(args) -> int:
    print(f"{solve_sensitivity(args.k, args.C, args.delta_prime):.10g}")
    return 0


def cmd_token_list(args) -> int:
    sizes = {i: args.samples_per_party for i in range(args.parties)}
    mix, _, keypairs = generate_token_list(sizes, args.seed, args.pke)
    if mix.tampering_detected or mix.final is None:
        logging.error("token list generation reported tampering")
        return 2
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_token_list(out, mix.final, [kp.public_key for kp in keypairs])
    print(f"wrote {len(mix.final)} tokens to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xsilo", description="Differentially private cross-silo learning simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run-experiment", help="run one configured experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="output directory (overrides config.output)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze-amplification", help="effective sampling fraction curve as CSV")
    a.add_argument("--n", type=int, default=10_000)
    a.add_argument("--b", type=int, default=100)
    a.add_argument("--slacks", default="0,1e-9,1e-6,1e-3")
    a.add_argument("--adv-fracs", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_amplification)

    s = sub.add_parser("solve-sensitivity", help="projection sensitivity for (k, C, delta')")
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--C", type=float, default=1.0)
    s.add_argument("--delta-prime", type=float, default=1e-6)
    s.set_defaults(func=cmd_sensitivity)

    t = sub.add_parser("make-token-list", help="run the mixnet and persist the token list")
    t.add_argument("--parties", type=int, required=True)
    t.add_argument("--samples-per-party", type=int, required=True)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--pke", choices=("x25519", "simulation"), default="x25519")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_token_list)
    return p


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("XSILO_LOG", "WARNING").upper(),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
