#!/usr/bin/env python3
"""
Command-line runner for the chaos lab.
Loads the experiment config, runs one subcommand and writes CSV tables,
JSON sidecars and the run manifest.
"""

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from dotenv import load_dotenv

from artifact_store import ArtifactStore, DiskArtifactStore
from config import describe, load_config, parse_assignment, validate_config
from errors import ConfigError, ExperimentError, GmcLabError, PreconditionError
from experiments import ExperimentHandler
from seed_schedule import SeedScheduler

logger = logging.getLogger(__name__)

TOOL_NAME = "gmc-lab"
TOOL_VERSION = "1.0.0"

EXIT_OK = 0
EXIT_ASSERTION = 1
EXIT_CONFIG = 2
EXIT_PRECONDITION = 3

DEFAULT_OUT_DIR = "runs"


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subparser per subcommand."""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (or a run manifest)")
    common.add_argument("--seed", type=int, help="Master seed (64-bit)")
    common.add_argument("--replicas", type=int, help="Replica count")
    common.add_argument("--workers", type=int, help="Worker processes (never changes results)")
    common.add_argument("--sigma", type=float, help="Tolerance of statistical checks in stderr")
    common.add_argument("--alpha", type=float, help="Lower chaos parameter")
    common.add_argument("--gamma", type=float, help="Upper chaos parameter")
    common.add_argument("--t", type=float, dest="t", help="Regularization scale")
    common.add_argument("--out-dir", help="Output directory (default: $GMC_OUT_DIR or ./runs)")
    common.add_argument(
        "--assert", dest="assert_checks", action="store_true",
        help="Exit 1 when any acceptance check fails",
    )
    common.add_argument(
        "--set", dest="assignments", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="Override any config value (repeatable)",
    )

    parser = argparse.ArgumentParser(
        prog=TOOL_NAME, description="Star-scale invariant fields and chaos ratios"
    )
    parser.add_argument("--version", action="version", version=f"{TOOL_NAME} {TOOL_VERSION}")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)
    for name in ExperimentHandler.subcommands():
        subparsers.add_parser(name, parents=[common])
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Dotted-key overrides from the flags; flags win over --set."""
    overrides: Dict[str, Any] = {}
    for text in args.assignments:
        key, value = parse_assignment(text)
        overrides[key] = value
    flags = {
        "seed": args.seed,
        "experiment.replicas": args.replicas,
        "experiment.sigma": args.sigma,
        "gmc.alpha": args.alpha,
        "gmc.gamma": args.gamma,
        "field.t": args.t,
    }
    overrides.update({key: value for key, value in flags.items() if value is not None})
    return overrides


def resolve_workers(flag: Optional[int], config_value: int) -> int:
    """--workers, then GMC_WORKERS, then the config value."""
    if flag is not None:
        workers = flag
    elif os.environ.get("GMC_WORKERS"):
        try:
            workers = int(os.environ["GMC_WORKERS"])
        except ValueError:
            raise ConfigError(f"GMC_WORKERS must be an integer, got {os.environ['GMC_WORKERS']!r}")
    else:
        workers = int(config_value)
    if workers < 1:
        raise ConfigError(f"Worker count must be >= 1, got {workers}")
    return workers


def resolve_out_dir(flag: Optional[str]) -> Path:
    """--out-dir, then GMC_OUT_DIR, then ./runs."""
    return Path(flag or os.environ.get("GMC_OUT_DIR") or DEFAULT_OUT_DIR)


def emit_results(
    store: ArtifactStore,
    result: Dict[str, Any],
    sidecar: Dict[str, Any],
) -> None:
    """
    Add every table (CSV plus JSON sidecar), binary artifact and the report.

    Args:
        store: Artifact store
        result: Handler result dictionary
        sidecar: Fields shared by every sidecar (config hash, seed, ...)
    """
    names = [f"{table['name']}.csv" for table in result["tables"]]
    names += [artifact["name"] for artifact in result["artifacts"]]
    for name in names:
        if store.exists(name) or names.count(name) > 1:
            raise ExperimentError(f"Output name {name} is used twice")
    for table in result["tables"]:
        store.add_table(f"{table['name']}.csv", table["header"], table["rows"])
        store.add_json(
            f"{table['name']}.json",
            dict(sidecar, table=table["name"], columns=table["header"], rows=len(table["rows"])),
        )
    for artifact in result["artifacts"]:
        store.add_artifact(artifact["name"], artifact["payload"], artifact["kind"])
    store.add_json(
        f"{result['type']}_report.json",
        {
            "subcommand": result["type"],
            "checks": result["checks"],
            "passed": all(check["passed"] for check in result["checks"]),
            "metadata": result["metadata"],
        },
    )


def run(
    subcommand: str,
    config_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    out_dir: Optional[Path] = None,
    workers: Optional[int] = None,
    assert_checks: bool = False,
    store: Optional[ArtifactStore] = None,
) -> Tuple[int, Dict[str, Any]]:
    """
    Run one subcommand end to end.

    Args:
        subcommand: Subcommand name
        config_path: Config file (defaults only if None)
        overrides: Dotted-key overrides
        out_dir: Output directory for the disk store
        workers: Worker processes (config value if None)
        assert_checks: Turn failed checks into exit status 1
        store: Artifact store to use instead of a disk store

    Returns:
        (exit status, handler result)

    Raises:
        ConfigError: invalid configuration (nothing sampled)
        PreconditionError: numerical precondition violated during the run
    """
    config = load_config(config_path).with_overrides(overrides or {})
    report = validate_config(config)
    workers = resolve_workers(workers, config.experiment["workers"])
    sigma = float(config.experiment["sigma"])

    if subcommand == ExperimentHandler.SUBCOMMAND_VALIDATE:
        logger.info(f"✓ Config valid: {describe(config)}")
        logger.info(f"Memory estimate: {report['memory_estimate_mib']} MiB")
        return EXIT_OK, {"status": "success", "type": subcommand, "metadata": report,
                         "checks": [], "tables": []}

    out_dir = out_dir or resolve_out_dir(None)
    logger.info("=" * 60)
    logger.info(f"{TOOL_NAME} {TOOL_VERSION}: {subcommand}")
    logger.info("=" * 60)
    logger.info(f"Parameters: {describe(config)}")
    logger.info(f"Replicas: {config.replicas}")
    logger.info(f"Workers: {workers}")
    logger.info(f"Output: {out_dir}")
    logger.info("=" * 60)

    started_at = datetime.now(timezone.utc).isoformat()
    started = time.perf_counter()
    scheduler = SeedScheduler(config.seed)
    handler = ExperimentHandler(config, scheduler, workers, sigma)
    result = handler.handle(subcommand)
    if result["status"] != "success":
        message = result.get("message", f"Subcommand {subcommand} failed")
        if result.get("error") == ExperimentHandler.ERROR_PRECONDITION:
            raise PreconditionError(message)
        raise ConfigError(message)
    wall_time = time.perf_counter() - started

    store = store if store is not None else DiskArtifactStore(out_dir)
    emit_results(
        store,
        result,
        {
            "subcommand": subcommand,
            "config_digest": config.digest,
            "seed": config.seed,
            "replicas": config.replicas,
            "wall_time_seconds": round(wall_time, 3),
            "metadata": result["metadata"],
        },
    )
    if isinstance(store, DiskArtifactStore):
        mismatched = store.verify()
        if mismatched:
            raise GmcLabError(f"Outputs do not match their digests on disk: {mismatched}")
    failed = [check["name"] for check in result["checks"] if not check["passed"]]
    store.write_manifest(
        {
            "tool": TOOL_NAME,
            "version": TOOL_VERSION,
            "subcommand": subcommand,
            "config": config.to_dict(),
            "config_digest": config.digest,
            "started_at": started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
            "wall_time_seconds": round(wall_time, 3),
            "workers": workers,
            "seed_schedule": scheduler.schedule_record(),
            "checks_failed": failed,
        }
    )

    if failed:
        logger.warning(f"⚠ {len(failed)} checks failed: {', '.join(failed)}")
    else:
        logger.info(f"✓ All {len(result['checks'])} checks passed")
    if assert_checks and failed:
        return EXIT_ASSERTION, result
    return EXIT_OK, result


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command-line interface."""
    load_dotenv()
    logging.basicConfig(
        level=os.environ.get("GMC_LOG_LEVEL", "INFO").upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)

    try:
        status, result = run(
            args.subcommand,
            config_path=args.config,
            overrides=collect_overrides(args),
            out_dir=resolve_out_dir(args.out_dir),
            workers=args.workers,
            assert_checks=args.assert_checks,
        )
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except PreconditionError as e:
        logger.error(f"Numerical precondition failed: {e}")
        return EXIT_PRECONDITION
    except GmcLabError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_PRECONDITION

    if args.subcommand == ExperimentHandler.SUBCOMMAND_VALIDATE:
        print(json.dumps(result["metadata"], indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
