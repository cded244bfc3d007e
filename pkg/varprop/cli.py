"""Command-line entry point: ``varprop <command> [options]``."""
import argparse
import json
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from varprop import __version__
from varprop.config import COMMANDS, Config, ExperimentConfig
from varprop.errors import ConfigurationError, ConsistencyError, OutputError, VarpropError
from varprop.experiments import run_command
from varprop.models import get_session, init_db
from varprop.network import InitScheme, kaiming_init
from varprop.run_service import RunService
from varprop.storage import parameter_digest, read_network

logger = logging.getLogger("varprop.cli")

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

# Experiment flags mapped onto ExperimentConfig fields.
_FLAG_FIELDS = (
    "depth",
    "widths",
    "samples",
    "networks",
    "seed",
    "batchnorm",
    "schemes",
    "nodes",
    "out",
    "fast",
    "workers",
    "frozen_stats",
    "bins",
)


def _parse_widths(text: str) -> List[int]:
    try:
        widths = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigurationError(f"--widths expects comma-separated integers, got {text!r}")
    if not widths:
        raise ConfigurationError("--widths is empty")
    return widths


def _parse_schemes(values: Optional[Sequence[str]]) -> Optional[List[str]]:
    if not values:
        return None
    return [s.strip() for value in values for s in value.split(",") if s.strip()]


def _load_config_file(path: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise OutputError(f"cannot read config file ({e.strerror})", path) from e
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise ConfigurationError(f"config file {path} must hold a JSON object")
    return document


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Config file values first, then every flag that was given."""
    values: Dict[str, Any] = {}
    if args.config:
        values.update(_load_config_file(args.config))
    values["command"] = args.command

    flags = dict(vars(args))
    flags["widths"] = _parse_widths(args.widths) if args.widths is not None else None
    flags["schemes"] = _parse_schemes(args.schemes)
    for name in _FLAG_FIELDS:
        if flags.get(name) is not None:
            values[name] = flags[name]
    return ExperimentConfig(**values)


def _add_experiment_parser(subparsers, command: str, help_text: str) -> None:
    p = subparsers.add_parser(command, help=help_text)
    p.add_argument("--depth", type=int, help="number of layers L")
    p.add_argument("--widths", help="comma-separated layer widths, e.g. 30,100,300")
    p.add_argument("--samples", type=int, help="samples per batch T")
    p.add_argument("--networks", type=int, help="networks per ensemble")
    p.add_argument("--seed", type=int, help="master seed (default 0)")
    p.add_argument("--batchnorm", action="store_true", default=None, help="batch-normalize every layer")
    p.add_argument("--scheme", dest="schemes", action="append", help="scheme name; repeat or comma-separate")
    p.add_argument("--nodes", type=int, help="quadrature nodes per axis")
    p.add_argument("--bins", type=int, help="histogram bins (distributions)")
    p.add_argument("--out", help=f"output directory (default {Config.OUT_DIR})")
    p.add_argument("--fast", action="store_true", default=None, help="reduced scale")
    p.add_argument("--workers", type=int, help="concurrent networks")
    p.add_argument(
        "--frozen-stats", action="store_true", default=None,
        help="treat batch statistics as constants in the backward pass",
    )
    p.add_argument("--config", help="JSON file with config values; flags override it")
    p.add_argument("--no-ledger", action="store_true", help="do not record the run")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="varprop",
        description="Mean-field predictions and Monte Carlo measurements of sample statistics in random ReLU networks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    subparsers = parser.add_subparsers(dest="command", required=True)

    _add_experiment_parser(subparsers, "theory", "wide-network trajectory of m, v and their ratio")
    _add_experiment_parser(subparsers, "finite-width", "ensemble mean-to-std ratio per width")
    _add_experiment_parser(subparsers, "gradients", "gradient magnitude vs. layer per scheme")
    _add_experiment_parser(subparsers, "init-check", "post-conditions of the data-dependent initializers")
    _add_experiment_parser(subparsers, "distributions", "pre-activation histograms, one network vs. ensemble")

    audit = subparsers.add_parser("audit", help="check a network dump and print its parameter digest")
    audit.add_argument("path", help="dump path or file://, gs://, s3:// URI")

    runs = subparsers.add_parser("runs", help="list recorded runs or show one")
    runs.add_argument("run_id", nargs="?")
    runs.add_argument("--out", help="output directory holding the ledger")
    runs.add_argument("--limit", type=int, default=20)

    serve = subparsers.add_parser("serve", help="start the HTTP service")
    serve.add_argument("--host", default=Config.HOST)
    serve.add_argument("--port", type=int, default=Config.PORT)
    return parser


def _ledger_session(out_dir: str):
    return get_session(init_db(Config.database_url(out_dir)))


def _run_experiment(args: argparse.Namespace) -> int:
    config = build_config(args)
    if args.no_ledger:
        paths = run_command(config)
    else:
        db_session = _ledger_session(config.out)
        try:
            result = RunService(db_session, Config).process_run(config, raise_errors=True)
        finally:
            db_session.close()
        paths = result["files"]
        if result["reproduced"] is not None:
            logger.info(f"Reproduced earlier run: {result['reproduced']}")
        logger.info(f"Run {result['run_id']} recorded")
    for path in paths:
        print(path)
    return 0


def _audit(args: argparse.Namespace) -> int:
    net = read_network(args.path)
    digest = parameter_digest(net)
    report = {
        "path": args.path,
        "widths": list(net.spec.widths),
        "init_scheme": net.spec.init_scheme.value,
        "seed": net.spec.seed,
        "sha256": digest,
        "regenerated": None,
    }
    if net.spec.init_scheme == InitScheme.KAIMING:
        report["regenerated"] = parameter_digest(kaiming_init(net.spec)) == digest
    print(json.dumps(report, indent=2, sort_keys=True))
    if report["regenerated"] is False:
        raise ConsistencyError(f"{args.path} does not match the network regenerated from its header")
    return 0


def _runs(args: argparse.Namespace) -> int:
    db_session = _ledger_session(args.out or Config.OUT_DIR)
    try:
        service = RunService(db_session, Config)
        if args.run_id:
            result = service.get_run_status(args.run_id)
            if not result:
                raise ConfigurationError(f"run {args.run_id} not found")
        else:
            result = service.list_runs(args.limit)
    finally:
        db_session.close()
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


def _serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("varprop.api:app", host=args.host, port=args.port)
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else Config.LOG_LEVEL,
        format=LOG_FORMAT,
        stream=sys.stderr,
    )
    try:
        if args.command in COMMANDS:
            return _run_experiment(args)
        if args.command == "audit":
            return _audit(args)
        if args.command == "runs":
            return _runs(args)
        return _serve(args)
    except ValidationError as e:
        logger.error(f"configuration error: {e}")
        return ConfigurationError.exit_code
    except VarpropError as e:
        logger.error(f"{e.category} error: {e}")
        return e.exit_code
    except Exception:
        logger.exception("unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
