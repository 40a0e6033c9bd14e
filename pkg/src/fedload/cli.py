"""Command-line entry point: ``fedload <command> [--config FILE] [overrides]``."""

from __future__ import annotations

import argparse
import logging
import sys

from fedload.config import ConfigError, ExperimentConfig
from fedload.pipeline import STAGES, Run, StageError, run_pipeline, run_stage

log = logging.getLogger("fedload")

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 1, 2


def _ints(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _k(text: str):
    if text == "elbow":
        return None
    try:
        return int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("k must be an integer or 'elbow'") from exc


def _schemes(text: str) -> list[str]:
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    S = argparse.SUPPRESS
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--verbose", "-v", action="store_true")
    g = p.add_argument_group("config overrides")
    g.add_argument("--csv-path", default=S, help="ingest this CSV instead of synthesizing a fleet")
    g.add_argument("--hours", type=int, default=S, help="length of the synthetic fleet in hours")
    g.add_argument("--lookback", type=int, default=S)
    g.add_argument("--train-fraction", type=float, default=S)
    g.add_argument("--fc1", type=_ints, default=S, help="grid values, e.g. 32,44,56,68")
    g.add_argument("--fc2", type=_ints, default=S)
    g.add_argument("--epochs", type=_ints, default=S)
    g.add_argument("--fast-tuning", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--k", type=_k, default=S, help="number of clusters, or 'elbow'")
    g.add_argument("--elbow-threshold", type=float, default=S)
    g.add_argument("--k-max", type=int, default=S)
    g.add_argument("--restarts", type=int, default=S)
    g.add_argument("--rounds", type=int, default=S)
    g.add_argument("--local-epochs", type=int, default=S)
    g.add_argument("--removal-factor", type=float, default=S)
    g.add_argument("--removal-lag", type=int, default=S)
    g.add_argument("--remove-deterrents", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--lstm-hidden", type=int, default=S)
    g.add_argument("--lr", type=float, default=S)
    g.add_argument("--batch-size", type=int, default=S)
    g.add_argument("--schemes", type=_schemes, default=S, help="comma-separated subset of federated,centralized,local")
    g.add_argument("--centralized-scope", choices=("cluster", "fleet"), default=S)
    g.add_argument("--centralized-alp", choices=("aggregate", "sum"), default=S)
    g.add_argument("--ablation", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--ablation-rounds", type=int, default=S)
    g.add_argument("--probe-client", default=S)
    g.add_argument("--traces", action=argparse.BooleanOptionalAction, default=S)
    g.add_argument("--output-dir", default=S)
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--workers", type=int, default=S)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedload", description="Clustered federated load forecasting experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "synthesize (or ingest) the fleet and write fleet.csv",
        "tune": "per-client hyperparameter grid search",
        "cluster": "k-means over tuned hyperparameters and per-cluster consolidation",
        "federate": "per-cluster federated training",
        "centralize": "centralized baseline training",
        "localize": "local-only baseline training",
        "report": "ILP/ALP error tables per cluster",
        "ablate": "probe-client loss with and without clustering",
        "pipeline": "all stages in order",
    }
    for name in (*STAGES, "pipeline"):
        _add_overrides(sub.add_parser(name, help=helps[name]))
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    base = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {
        k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")
    }
    return base.with_overrides(**overrides)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad usage, which would read as a stage failure
        if exc.code in (0, None):
            raise
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "pipeline":
            run = run_pipeline(cfg)
        else:
            run = Run.create(cfg)
            run_stage(run, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{args.command}: done ({run.root}, config {run.hash})")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
