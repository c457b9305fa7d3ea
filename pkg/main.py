"""NDT Untwin - command-line entry point.

Runs forward twinning over simulated traffic sensors, removes NDTs from the
shared twin model with SRU or PRU, checks the result against retraining from
scratch and summarises the artifacts of a run directory.
"""

import argparse
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables
load_dotenv(override=True)

from loguru import logger
from src.core.config import RunConfig, load_run_config
from src.core.errors import InvalidInput, UntwinError
from src.services.experiment import UntwinOptions, create_experiment_runner


def setup_logging(debug: bool = False) -> None:
    """Set up logging configuration.

    Args:
        debug: Whether to enable debug logging
    """
    logger.remove()
    level = "DEBUG" if debug else "INFO"
    logger.add(sys.stdout, level=level)

    if debug:
        logger.debug("Debug mode enabled")


def parse_ids(text: str) -> List[int]:
    """Parse a comma separated NDT id list such as ``1,4,7``."""
    try:
        ids = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise InvalidInput(f"NDT ids must be integers, got: '{text}'")
    if not ids:
        raise InvalidInput("At least one NDT id is required")
    return ids


def build_parser() -> argparse.ArgumentParser:
    """Build the argument parser with the twin, untwin, compare and report commands.

    Returns:
        Configured ArgumentParser
    """
    parser = argparse.ArgumentParser(
        description="Twin simulated network nodes and untwin them from the shared model"
    )
    parser.add_argument("--debug", action="store_true", help="Enable debug logging")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, help="Path to a JSON or YAML run configuration")
    common.add_argument("--seed", type=int, help="Override the run and scenario seed")
    common.add_argument("--out", type=str, help="Output directory (overrides UNTWIN_OUT and the config)")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("twin", parents=[common], help="Run forward twinning and store checkpoints")

    untwin = sub.add_parser("untwin", parents=[common], help="Remove NDTs from the twin model")
    untwin.add_argument("mode", choices=["sru", "pru"], help="Single-request or parallel-request untwinning")
    untwin.add_argument("--target", type=int, help="NDT to remove (sru)")
    untwin.add_argument("--requests", type=str, help="Comma separated NDT ids (pru)")
    untwin.add_argument("--with-oracle", action="store_true", help="Also retrain from scratch and report PED")
    untwin.add_argument("--noise", type=float, help="Override the calibrated noise sigma")
    untwin.add_argument("--force-t-star", type=int, help="Force the restart round")
    untwin.add_argument("--rollback-rule", choices=["theorem", "literal"], help="Rollback depth rule")

    compare = sub.add_parser("compare", parents=[common], help="Indistinguishability probe against scratch retraining")
    compare.add_argument("--target", type=int, default=0, help="NDT to remove in every seeded run")
    compare.add_argument("--seeds", type=int, help="Number of seeds (at least 30)")
    compare.add_argument("--self-check", action="store_true", help="Compare scratch retraining with itself")

    report = sub.add_parser("report", parents=[common], help="Summarise a run directory")
    report.add_argument("--ablation", action="store_true", help="Replay the history through every checkpoint policy")
    report.add_argument("--study", action="store_true", help="Compare removing a target alone with removing its connected set")
    report.add_argument("--target", type=int, default=0, help="NDT studied with --study")
    report.add_argument("--seeds", type=int, help="Number of seeds for --study (defaults to probe.seeds)")
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """Load the run configuration and apply the command-line overrides.

    Args:
        args: Parsed command-line arguments

    Returns:
        Validated RunConfig with --seed and --out applied
    """
    config = load_run_config(args.config)
    if args.seed is not None:
        config = config.with_seed(args.seed)
    if args.out:
        config.execution.output_dir = args.out
    return config


def run(args: argparse.Namespace) -> None:
    """Dispatch a parsed command to the experiment runner.

    Args:
        args: Parsed command-line arguments

    Raises:
        InvalidInput: If untwin is missing its --target or --requests
    """
    config = load_config(args)
    runner = create_experiment_runner(config)

    if args.command == "twin":
        runner.cmd_twin()

    elif args.command == "untwin":
        if args.mode == "sru":
            if args.target is None:
                raise InvalidInput("untwin sru needs --target")
            targets = [args.target]
        else:
            if not args.requests:
                raise InvalidInput("untwin pru needs --requests")
            targets = parse_ids(args.requests)
        options = UntwinOptions(
            with_oracle=args.with_oracle,
            noise=args.noise,
            force_t_star=args.force_t_star,
            rollback_rule=args.rollback_rule,
        )
        outcome = runner.cmd_untwin(args.mode, targets, options)
        for plan in outcome.result.plans:
            logger.info(
                f"Plan: K={plan.k}, t*={plan.t_star}, sigma={plan.sigma:.3g}, S_u={plan.members}"
            )
        logger.success(
            f"Untwinning done: MSE target {outcome.report.mse_target:.5f}, "
            f"remaining {outcome.report.mse_remaining:.5f}"
        )

    elif args.command == "compare":
        probe = runner.cmd_compare(args.target, args.seeds, args.self_check)
        logger.success(
            f"Probe: KS={probe.ks_statistic:.4f}, p={probe.permutation_pvalue:.4f}, {probe.decision}"
        )

    elif args.command == "report":
        print(runner.cmd_report(ablation=args.ablation, study=args.study, target=args.target, seeds=args.seeds))


def main(argv: Optional[List[str]] = None) -> None:
    """Main entry point for the NDT Untwin command line."""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        setup_logging(debug=args.debug)
        run(args)

    except KeyboardInterrupt:
        logger.info("Process interrupted by user")
        sys.exit(130)

    except UntwinError as e:
        logger.error(f"{type(e).__name__}: {e}")
        if args.debug:
            logger.exception("Full error traceback:")
        sys.exit(2)

    except Exception as e:
        logger.error(f"Fatal error: {e}")
        if args.debug:
            logger.exception("Full error traceback:")
        sys.exit(1)


if __name__ == "__main__":
    main()
