"""``cpl``: configuration-driven study runner.

Exit codes: 0 success, 1 runtime failure (the failing stage is named),
2 configuration error (field-level diagnostics on stderr).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import (
    ConfigError,
    ExperimentConfig,
    Finding,
    from_mapping,
    load_toml,
    runtime_class,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DEFAULT_OUT = "runs"

# subcommands that are shorthands for a study
STUDY_COMMANDS = {"oracle": "oracle", "gaussian": "gaussian", "amce": "amce"}


def _common(p: argparse.ArgumentParser, config_required: bool = False) -> None:
    p.add_argument("config", nargs=None if config_required else "?", help="study TOML file")
    p.add_argument("--preset", help="built-in or studies/ preset to start from")
    p.add_argument("--seed", type=int, help="override the root seed")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.add_argument("--out", help="output directory (default $CPL_OUT_DIR/<name>, else runs/<name>; "
                                 "stages other than run append -<stage>)")
    p.add_argument("--no-figures", action="store_true", help="write CSV/JSON only, no PNG figures")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cpl", description=__doc__.splitlines()[0].replace("``", ""))
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("run", "run a study end to end"),
        ("generate", "write the datasets of a model study as JSONL"),
        ("train", "train a model study and write checkpoints"),
        ("oracle", "identification oracle checks on finite worlds"),
        ("gaussian", "arcsin closed form vs Monte Carlo and the fitted-boundary tables"),
        ("amce", "AMCE table with its brute-force oracle"),
    ):
        _common(sub.add_parser(name, help=help_text))
    ev = sub.add_parser("eval", help="evaluate checkpoints written by `train`")
    _common(ev)
    ev.add_argument("--checkpoints", required=True, help="directory written by `cpl train`")
    val = sub.add_parser("validate", help="check a config without running it")
    val.add_argument("config", nargs="?")
    val.add_argument("--preset")
    val.add_argument("--seed", type=int)
    bat = sub.add_parser("battery", help="run the acceptance battery")
    bat.add_argument("--budget", choices=("desk", "paper-scale"), default="desk")
    bat.add_argument("--jobs", type=int, default=1)
    bat.add_argument("--out", help="output directory (default $CPL_OUT_DIR/battery)")
    bat.add_argument("--only", type=int, nargs="+", metavar="N", help="run only these check numbers")
    bat.add_argument("-v", "--verbose", action="store_true")
    return parser


def _raw_config(args) -> tuple[dict[str, Any], Path | None, str]:
    raw: dict[str, Any] = {}
    base_dir = None
    name = args.preset or ""
    if getattr(args, "config", None):
        path = Path(args.config)
        raw = load_toml(path)
        base_dir = path.resolve().parent
        name = path.stem
    if args.preset and "preset" not in raw:
        raw["preset"] = args.preset
    study = STUDY_COMMANDS.get(getattr(args, "command", ""))
    if study is not None:
        if not raw:
            raw = {"preset": study}
            name = study
    if not raw:
        raise ConfigError([Finding("error", "config", "give a config file or --preset")])
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return raw, base_dir, name


def _load(args) -> tuple[ExperimentConfig, str]:
    raw, base_dir, name = _raw_config(args)
    cfg = from_mapping(raw, base_dir, args.config or f"preset:{args.preset}")
    study = STUDY_COMMANDS.get(args.command)
    if study is not None and cfg.study != study:
        raise ConfigError([Finding("error", "study", f"`cpl {args.command}` needs a {study} config, "
                                                     f"got {cfg.study!r}")])
    return cfg, name


def out_dir(args, name: str) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("CPL_OUT_DIR") or DEFAULT_OUT) / name


def _print_findings(findings: Sequence[Finding], stream) -> None:
    for f in findings:
        print(f"  {f}", file=stream)


def cmd_validate(args) -> int:
    from .config import resolve

    try:
        raw, base_dir, _ = _raw_config(args)
        data, findings, chain = resolve(raw, base_dir)
    except ConfigError as exc:
        print("config invalid:", file=sys.stderr)
        _print_findings(exc.findings, sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    errors = [f for f in findings if f.level == "error"]
    print(f"study: {data.get('study')}")
    print(f"presets: {' -> '.join(chain) if chain else '(none)'}")
    if not errors:
        cfg = ExperimentConfig(data, findings, chain)
        secs = cfg.estimated_seconds()
        print(f"estimated runtime: {runtime_class(secs)} (~{secs:.0f}s on one core)")
        print(f"config hash: {cfg.hash()}")
    print(f"findings: {len(errors)} error(s), {len(findings) - len(errors)} warning(s)")
    _print_findings(findings, sys.stdout)
    return EXIT_CONFIG if errors else EXIT_OK


def cmd_study(args) -> int:
    from .studies import StageError, run

    try:
        cfg, name = _load(args)
    except ConfigError as exc:
        print("config invalid:", file=sys.stderr)
        _print_findings(exc.findings, sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config invalid: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for w in cfg.warnings:
        print(f"warning: {w.path}: {w.message}", file=sys.stderr)
    stage = args.command if args.command in ("generate", "train", "eval") else "run"
    if stage != "run" and cfg.study not in ("ultrafeedback", "confounded"):
        print(f"config invalid:\n  error: study: `cpl {stage}` applies to model studies, got {cfg.study!r}",
              file=sys.stderr)
        return EXIT_CONFIG
    dest = out_dir(args, name if stage == "run" else f"{name}-{stage}")
    try:
        result = run(cfg, dest, jobs=max(1, args.jobs), figures=False if args.no_figures else None,
                     stage=stage, checkpoints_from=getattr(args, "checkpoints", None))
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if "report" in result:
        print(result["report"].table())
    print(f"wrote {len(result['manifest']['files']) + 1} files under {dest}")
    return EXIT_OK


def cmd_battery(args) -> int:
    from .suite import run_full_battery

    dest = Path(args.out) if args.out else Path(os.environ.get("CPL_OUT_DIR") or DEFAULT_OUT) / "battery"
    ok, results = run_full_battery(args.budget, dest, jobs=max(1, args.jobs), only=args.only)
    for r in results:
        print(r.line())
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed; reports under {dest}")
    return EXIT_OK if ok else EXIT_RUNTIME


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        return cmd_validate(args)
    if args.command == "battery":
        return cmd_battery(args)
    return cmd_study(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
