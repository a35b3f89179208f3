"""``vcl-lab <subcommand> --config <path> [--out <dir>] [--seed <int>]``

Exit codes: 0 when every enabled check passes, 1 when a check fails or
training aborts, 2 for usage and config errors.
"""

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import __version__
from . import _kernels
from .data import DataError
from .experiments import DEFAULTS, RUNNERS, defaults, write_report
from .trainer import ConfigError
from .vcl import VclConfigError

log = logging.getLogger("vcl_lab")

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def merge_config(base: dict, override: dict, where: str = "") -> dict:
    """Overlay ``override`` onto ``base``; keys absent from ``base`` are rejected.

    Nested dicts merge recursively; every other value replaces wholesale.
    """
    if not isinstance(override, dict):
        raise UsageError(f"{where or 'config'} must be a mapping")
    out = dict(base)
    for key, val in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise UsageError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            out[key] = merge_config(base[key], val, path)
        else:
            out[key] = _coerce(base[key], val, path)
    return out


def _coerce(default, val, path):
    if default is None or val is None:
        return val
    if isinstance(default, bool):
        if not isinstance(val, bool):
            raise UsageError(f"{path} must be true or false")
        return val
    if isinstance(default, int) and not isinstance(val, bool) and isinstance(val, int):
        return val
    if isinstance(default, float) and not isinstance(val, bool) and isinstance(val, (int, float)):
        return float(val)
    if isinstance(default, (int, float)):
        raise UsageError(f"{path} must be a number, got {val!r}")
    if isinstance(default, str) and not isinstance(val, str):
        raise UsageError(f"{path} must be a string, got {val!r}")
    if isinstance(default, list) and not isinstance(val, list):
        raise UsageError(f"{path} must be a list, got {val!r}")
    return val


def load_config(command: str, path=None, seed=None, out=None) -> dict:
    cfg = defaults(command)
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh)
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise UsageError(f"malformed YAML in {path}: {exc}") from exc
        cfg = merge_config(cfg, raw or {})
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = str(out)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vcl-lab", description="Variance constancy experiments and checks.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in RUNNERS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML config; omitted keys take documented defaults")
        sp.add_argument("--out", type=Path, help="output directory (overrides the config's 'out')")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, cfg: dict) -> int:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = RUNNERS[command](cfg, out)
    full = {"command": command, "seed": cfg["seed"], "backend": _kernels.BACKEND,
            "config": cfg, "defaults": DEFAULTS[command], **report}
    write_report(out / "report.json", full)
    for c in report["checks"]:
        log.info("%s %s", "PASS" if c["passed"] else "FAIL", c["name"])
    return EXIT_OK if report["passed"] else EXIT_CHECK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.command, args.config, args.seed, args.out)
        return run(args.command, cfg)
    except (UsageError, ConfigError, VclConfigError, DataError, IndexError) as exc:
        print(f"vcl-lab {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"vcl-lab {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
