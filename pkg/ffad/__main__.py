import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from ffad import pipeline
from ffad.config import RunConfig, load_config, load_profile
from ffad.errors import ConfigError, DataError, FFADError, NumericError
from ffad.logging import setup_logging

logger = logging.getLogger("ffad")

STAGE_COMMANDS = {
    "synth": pipeline.run_synth,
    "parse-logs": pipeline.run_parse,
    "preprocess": pipeline.run_preprocess,
    "train": pipeline.run_train,
    "detect": pipeline.run_detect,
    "evaluate": pipeline.run_evaluate,
    "report": pipeline.run_report,
    "run-all": pipeline.run_all,
}


class ArgumentParser(argparse.ArgumentParser):
    """
    Argument parser exiting with code 1 on usage errors.
    """

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        "-c",
        type=Path,
        default=None,
        help="YAML run configuration. Takes precedence over --profile.",
    )
    common.add_argument(
        "--profile",
        default=None,
        help="Name of a configuration profile shipped with ffad (e.g. benchmark).",
    )
    common.add_argument(
        "--output",
        "-o",
        type=Path,
        default=None,
        help="Run output directory (default: output_dir from the config).",
    )
    common.add_argument(
        "--overwrite",
        "-x",
        action="store_true",
        help="Replace existing stage outputs.",
    )
    common.add_argument("--metrics", type=Path, default=None, help="Metrics CSV.")
    common.add_argument("--logs", type=Path, default=None, help="Log file.")
    common.add_argument("--labels", type=Path, default=None, help="Block labels CSV.")
    common.add_argument(
        "--verbose",
        "-v",
        action="count",
        default=0,
        help="Increase verbosity level.",
    )

    parser = ArgumentParser(
        prog="ffad",
        description="Multi-modal log and metric anomaly detection with Fourier graph "
        "operators.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    helps = {
        "synth": "Generate a labeled synthetic telemetry dataset.",
        "parse-logs": "Mine log templates and assign template ids to every line.",
        "preprocess": "Align, normalize and split the multi-modal series.",
        "train": "Train the model and write a checkpoint and loss curve.",
        "detect": "Score windows and fit a threshold on validation.",
        "evaluate": "Window-level precision, recall and F1 on the test split.",
        "report": "Export per-window scores and frequency-mask firing rates.",
        "run-all": "Run every stage in order.",
    }
    for name, help in helps.items():
        cmd = sub.add_parser(
            name, parents=[common], help=help, description=help
        )
        if name == "train":
            cmd.add_argument(
                "--resume",
                action="store_true",
                help="Continue from the latest state of an existing checkpoint.",
            )
        if name == "evaluate":
            cmd.add_argument(
                "--precision",
                type=float,
                default=None,
                help="Print the F1 of a precision/recall pair instead of evaluating a run.",
            )
            cmd.add_argument("--recall", type=float, default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    if args.config is not None:
        config = load_config(args.config)
    elif args.profile is not None:
        config = load_profile(args.profile)
    else:
        config = RunConfig()

    ingest = config.ingest
    if args.metrics is not None:
        ingest.metrics_path = str(args.metrics)
    if args.logs is not None:
        ingest.logs_path = str(args.logs)
    if args.labels is not None:
        ingest.labels_path = str(args.labels)
    if args.output is not None:
        config.output_dir = str(args.output)
    return config


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, FFADError):
        return exc.exit_code
    if isinstance(exc, FileNotFoundError):
        return DataError.exit_code
    if isinstance(exc, FloatingPointError):
        return NumericError.exit_code
    return 1


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    log_level = ["ERROR", "WARNING", "INFO", "DEBUG"][min(args.verbose, 3)]

    if args.command == "evaluate" and (args.precision is not None or args.recall is not None):
        setup_logging(level=log_level, overwrite=True)
        if args.precision is None or args.recall is None:
            parser.error("--precision and --recall must be given together")
        try:
            report = pipeline.evaluate_rates(args.precision, args.recall)
        except ValueError as exc:
            logger.error("%s", exc)
            return ConfigError.exit_code
        print(json.dumps(report.to_dict(), indent=2))
        return 0

    try:
        config = resolve_config(args)
    except ConfigError as exc:
        setup_logging(level=log_level, overwrite=True)
        logger.error("%s", exc)
        return exc.exit_code

    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    setup_logging(level=log_level, log_path=out_dir / "run.log", overwrite=True)
    logger.info("ffad %s (config hash %s)", args.command, config.config_hash())

    kwargs = {"overwrite": args.overwrite}
    if args.command == "train":
        kwargs["resume"] = args.resume
    try:
        STAGE_COMMANDS[args.command](config, **kwargs)
    except (FFADError, FileNotFoundError, FloatingPointError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
