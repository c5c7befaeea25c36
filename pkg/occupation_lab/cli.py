# occupation_lab/cli.py
"""
Command-line entry point.

    python -m occupation_lab capacity --set "B(0,4)" --accuracy 1e-3
    python -m occupation_lab theta --F F2 --levels 0,0.5,1,2 --replicas 1e5
    python -m occupation_lab lower-bound --config experiments/f2_nu02.toml
    python -m occupation_lab rerun --manifest results/manifest.txt --out results/again

Exit status: 0 when every check passes, 1 when a check fails or is
inconclusive, 2 on configuration errors.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from . import harness
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, InfeasibleLevelError, LabError
from .settings import configure_logging, seed_override

logger = logging.getLogger("occupation-lab.cli")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

CONFIG_COMMANDS: Dict[str, Callable[[ExperimentConfig], harness.ExperimentReport]] = {
    "solve": harness.run_solve,
    "tilt-entropy": harness.run_tilt_entropy,
    "qsd": harness.run_qsd,
    "couple-check": harness.run_couple_check,
    "typicality": harness.run_typicality,
    "lower-bound": harness.run_lower_bound,
    "concentration": harness.run_poisson_concentration,
}

ALL_STAGES = ("solve", "quasimin", "tilt-entropy", "qsd", "couple-check", "lower-bound", "direct", "concentration")


def _levels(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"levels must be comma-separated numbers, got {text!r}")


def _count(text: str) -> int:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a count, got {text!r}")
    if value != int(value) or value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive whole number, got {text!r}")
    return int(value)


def _pair(text: str):
    left, sep, right = text.partition(":")
    if not sep:
        raise argparse.ArgumentTypeError(f"pair must look like 'x1,x2,x3:y1,y2,y3', got {text!r}")
    try:
        return tuple(int(v) for v in left.split(",")), tuple(int(v) for v in right.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"pair coordinates must be integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occupation-lab", description="Occupation-time field experiments")
    parser.add_argument("--log-level", default=None, help="overrides OCCUPATION_LAB_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    cap = sub.add_parser("capacity", help="capacity of a finite set")
    cap.add_argument("--set", dest="site_set", required=True, help='"B(0,4)" or "{0,e1}"')
    cap.add_argument("--accuracy", type=float, default=1e-4)
    cap.add_argument("--d", type=int, default=3)
    cap.add_argument("--out", default="results")

    green = sub.add_parser("green", help="Green function values")
    green.add_argument("--pair", dest="pairs", type=_pair, action="append", required=True)
    green.add_argument("--accuracy", type=float, default=1e-4)
    green.add_argument("--out", default="results")

    theta = sub.add_parser("theta", help="theta estimate on a level grid")
    theta.add_argument("--F", dest="functional", required=True)
    theta.add_argument("--levels", type=_levels, required=True)
    theta.add_argument("--replicas", type=_count, default=100_000)
    theta.add_argument("--seed", type=int, default=0)
    theta.add_argument("--d", type=int, default=3)
    theta.add_argument("--workers", type=int, default=None)
    theta.add_argument("--out", default="results")

    for name in (*CONFIG_COMMANDS, "quasimin", "all"):
        cmd = sub.add_parser(name, help=f"{name} from an experiment config")
        cmd.add_argument("--config", required=True)
        cmd.add_argument("--out", default=None, help="overrides the config output directory")
        if name == "lower-bound":
            cmd.add_argument("--direct", action="store_true", help="also run the direct SRW check")

    rerun_cmd = sub.add_parser("rerun", help="repeat the run recorded in a manifest")
    rerun_cmd.add_argument("--manifest", required=True)
    rerun_cmd.add_argument("--out", required=True, help="directory for the repeated artifacts")
    return parser


def _finish(command: str, reports: Sequence[harness.ExperimentReport], out: Path, argv: Sequence[str],
            config: Optional[ExperimentConfig] = None, seed: Optional[int] = None,
            config_path: Optional[str] = None) -> int:
    files = []
    for report in reports:
        files.extend(harness.write_report(report, out))
    harness.write_manifest(out, command, files, config=config, seed=seed, argv=argv, config_path=config_path)
    failed = [check.test_id for report in reports for check in report.checks if not check.passed]
    if failed:
        logger.warning(f"{command}: {len(failed)} checks did not pass: {', '.join(failed)}")
        return EXIT_FAILED
    logger.info(f"{command}: all checks passed; artifacts in {out}")
    return EXIT_OK


def _run_config_command(args, argv: Sequence[str]) -> int:
    config = load_config(args.config)
    out = Path(args.out or config.output)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "all":
        reports = [_stage(stage, config, out) for stage in ALL_STAGES]
    elif args.command == "quasimin":
        reports = [harness.run_quasimin(config, out)]
    else:
        reports = [CONFIG_COMMANDS[args.command](config)]
        if args.command == "lower-bound" and args.direct:
            bound = reports[0].rows[-1]["normalized_bound"] if reports[0].rows[-1]["N"] == config.direct.N else None
            reports.append(harness.run_direct_check(config, bound))
    return _finish(args.command, reports, out, argv, config=config, config_path=args.config)


def _stage(stage: str, config: ExperimentConfig, out: Path) -> harness.ExperimentReport:
    logger.info(f"Running stage {stage} of {config.experiment}")
    if stage == "quasimin":
        return harness.run_quasimin(config, out)
    if stage == "direct":
        return harness.run_direct_check(config)
    return CONFIG_COMMANDS[stage](config)


def _with_option(argv: Sequence[str], option: str, value: str) -> List[str]:
    kept, skip = [], False
    for token in argv:
        if skip:
            skip = False
        elif token == option:
            skip = True
        elif not token.startswith(option + "="):
            kept.append(token)
    return kept + [option, value]


def rerun(manifest: str, out: str) -> int:
    """Repeat the command line of a manifest into `out`; config commands read the embedded config copy."""
    recorded = harness.read_manifest(manifest)
    argv = _with_option(recorded["argv"], "--out", str(out))
    if any(token == "--config" or token.startswith("--config=") for token in argv):
        embedded = Path(manifest).parent / harness.EMBEDDED_CONFIG
        if not embedded.is_file():
            raise ConfigurationError(f"{manifest} has no embedded config next to it")
        argv = _with_option(argv, "--config", str(embedded))
    if recorded.get("command") == "theta" and recorded.get("seed", "none") != "none":
        argv = _with_option(argv, "--seed", recorded["seed"])
    logger.info(f"Repeating {recorded.get('command')} from {manifest} into {out}")
    return main(argv)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == "capacity":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            return _finish("capacity", [harness.run_capacity(args.site_set, args.accuracy, args.d)], out, argv)
        if args.command == "green":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            return _finish("green", [harness.run_green(args.pairs, args.accuracy)], out, argv)
        if args.command == "theta":
            out = Path(args.out)
            out.mkdir(parents=True, exist_ok=True)
            seed = seed_override()
            seed = args.seed if seed is None else seed
            report = harness.run_theta(args.functional, args.levels, args.replicas, seed, args.d, args.workers)
            return _finish("theta", [report], out, argv, seed=seed)
        if args.command == "rerun":
            return rerun(args.manifest, args.out)
        return _run_config_command(args, argv)
    except (ConfigurationError, InfeasibleLevelError) as e:
        logger.error(f"Configuration error: {str(e)}")
        return EXIT_CONFIG
    except LabError as e:
        logger.error(f"{args.command} failed: {str(e)}", exc_info=True)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
