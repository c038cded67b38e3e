"""Command line entry point: ``isac <experiment> [--config FILE] --out DIR``.

Exit status is 0 on success, 2 when the rate/power requirements are
infeasible and 3 when the solver or rank-one recovery fails.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from typing import Optional, Sequence

from . import harness
from .optimizer import DesignInfeasibleError, RecoveryError, SolverFailureError

EXIT_OK, EXIT_INFEASIBLE, EXIT_SOLVER = 0, 2, 3

_RUNNERS = {
    "crb-vs-rate": harness.run_crb_vs_rate,
    "music-spectrum": harness.run_music_spectrum,
    "crb-vs-distance": harness.run_crb_vs_distance,
    "design": harness.run_single_design,
    "music-mse": harness.run_music_mse,
}

_HELP = {
    "crb-vs-rate": "RCRB of the fully-digital and hybrid designs versus the rate requirement",
    "music-spectrum": "near- and far-field MUSIC spectra on a Cartesian grid",
    "crb-vs-distance": "RCRB versus target distance with a far-field angle baseline",
    "design": "one waveform design with rates, power and RCRBs",
    "music-mse": "Monte Carlo MUSIC error against the CRB",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="isac", description="Near-field ISAC experiments.")
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in harness.EXPERIMENTS:
        p = sub.add_parser(name, help=_HELP[name])
        p.add_argument("--config", help="flat key = value scenario file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        p.add_argument("--paper-scale", action="store_true",
                       help="65 antennas at 20 dBm instead of the 17-antenna desk preset")
        p.add_argument("--trials", type=int, help="override the trial count of the config")
        p.add_argument("--workers", type=int, default=1, help="processes for independent trials")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = harness.load_scenario(args.config, paper_scale=args.paper_scale)
        if args.trials is not None:
            cfg = dataclasses.replace(cfg, trials=args.trials)
        exp = harness.ExperimentConfig(args.experiment, cfg, seed=args.seed, out_dir=args.out,
                                       scale="paper" if args.paper_scale else "desk",
                                       workers=args.workers)
    except (OSError, ValueError) as exc:
        print(f"isac: invalid configuration: {exc}", file=sys.stderr)
        return 1
    try:
        _RUNNERS[args.experiment](exp)
    except DesignInfeasibleError as exc:
        print(f"isac: infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverFailureError, RecoveryError) as exc:
        print(f"isac: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    print(f"isac: wrote results to {args.out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
