import argparse
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from cache_manager import SRBTableCache
from errors import ConfigError, ErrorDetail, LeafheatError, NumericalError
from models import EXPERIMENTS, LIBRARY_VERSION, ExperimentConfig
from runner import ExperimentRunner, default_threads

# Load environment variables
load_dotenv()

DEBUG_MODE = os.getenv('LEAFHEAT_DEBUG', 'false').lower() in ('true', '1', 'yes', 'on')
VERBOSE = os.getenv('LEAFHEAT_VERBOSE', 'false').lower() in ('true', '1', 'yes', 'on')

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False):
    log_level = logging.DEBUG if (DEBUG_MODE or VERBOSE or verbose) else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    logging.getLogger().setLevel(log_level)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="leafheat",
        description="SRB leaf measures, leafwise Dirichlet forms, heat semigroups and walks",
    )
    parser.add_argument("--version", action="version", version=f"leafheat {LIBRARY_VERSION}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="EXPERIMENT")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", help="YAML experiment configuration")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--cache-dir", help="directory for cached SRB tables")
        p.add_argument("--threads", type=int, help="worker threads for walker ensembles")
        p.add_argument("--n", type=int, help="forward iterates for quasi-invariance")
        p.add_argument("--output", help="CSV output path (stdout when absent)")
        p.add_argument("--verbose", action="store_true", help="debug logging")
        p.add_argument("--no-cache", action="store_true", help="neither read nor write the cache")
    return parser


def load_config_file(path: Optional[str]) -> Dict[str, Any]:
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config file: {e}", path=path) from e
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}", path=path) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must contain a mapping", path=path)
    return data


def merge_overrides(data: Dict[str, Any], args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flag > config key > environment > default."""
    data = dict(data)
    data["experiment"] = args.command
    if args.seed is not None:
        data["seed"] = args.seed
    if args.cache_dir is not None:
        data["cache_dir"] = args.cache_dir
    elif data.get("cache_dir") is None and os.getenv("LEAFHEAT_CACHE_DIR"):
        data["cache_dir"] = os.getenv("LEAFHEAT_CACHE_DIR")
    if args.threads is not None:
        data["threads"] = args.threads
    elif data.get("threads") is None:
        env_threads = default_threads()
        if env_threads is not None:
            data["threads"] = env_threads
    if args.n is not None:
        qi = dict(data.get("quasi_invariance") or {})
        qi["n"] = args.n
        data["quasi_invariance"] = qi
    if args.output is not None:
        out = dict(data.get("output") or {})
        out["path"] = args.output
        data["output"] = out
    return data


def validation_details(error: ValidationError) -> List[ErrorDetail]:
    return [
        ErrorDetail(message=err["msg"], type=err["type"],
                    param=".".join(str(part) for part in err["loc"]), code="invalid_config")
        for err in error.errors()
    ]


def report_error(details: List[ErrorDetail], hint: Optional[str] = None):
    payload = {"errors": [d.model_dump() for d in details]}
    if hint:
        payload["hint"] = hint
    print(json.dumps(payload, default=str), file=sys.stderr)


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    configure_logging(args.verbose)

    try:
        data = merge_overrides(load_config_file(args.config), args)
        config = ExperimentConfig.model_validate(data)
    except ValidationError as e:
        logger.error(f"Invalid configuration: {len(e.errors())} error(s)")
        report_error(validation_details(e), hint="see configs/ for annotated examples")
        return ConfigError.exit_code
    except ConfigError as e:
        logger.error(e.message)
        report_error([e.to_detail()])
        return e.exit_code

    try:
        cache = SRBTableCache(config.cache_dir, enabled=not args.no_cache)
        runner = ExperimentRunner(config, cache=cache)
        runner.run(args.command)
        logger.debug(f"Cache stats: {cache.get_stats()}")
    except ConfigError as e:
        logger.error(e.message)
        report_error([e.to_detail()])
        return e.exit_code
    except NumericalError as e:
        logger.error(f"{type(e).__name__}: {e.message} {e.context}")
        report_error([e.to_detail()])
        return e.exit_code
    except LeafheatError as e:
        logger.error(e.message)
        report_error([e.to_detail()])
        return e.exit_code
    except ValueError as e:
        logger.error(f"Experiment failed: {e}")
        report_error([ErrorDetail(message=str(e), type="ValueError", code=NumericalError.code)])
        return NumericalError.exit_code
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
