"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 a theorem
check failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from urpa.adaptation import AdaptationError
from urpa.bench import (
    ABLATIONS,
    REPORT_HEADER,
    format_table,
    report_row,
    run_ablation,
    run_experiment,
    write_ablation,
)
from urpa.config import ConfigError, default_config, load_config
from urpa.envgen import DatasetFormatError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise _UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML experiment config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--shots", type=int, choices=(100, 200))
    p.add_argument("--gamma", type=float)
    p.add_argument("--rollouts", type=int, help="group size G")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="urpa", description="Rollout-uncertainty test-time adaptation on synthetic grounding data")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "gen": "generate source, target and test datasets",
        "train-source": "train the source policy with GRPO",
        "adapt": "adapt the source policy on K unlabelled target samples",
        "eval": "evaluate source-only and adapted policies",
        "theorem": "run the rollout-std consistency checks",
        "ablate": "compare adaptation variants over several seeds",
        "run": "full pipeline",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "ablate":
            p.add_argument("--variants", default="no_confidence,no_relaxation",
                           help=f"comma-separated subset of {','.join(ABLATIONS)}")
            p.add_argument("--n-seeds", type=int, default=5)
        if name == "theorem":
            p.add_argument("--probe", action="store_true", help="also probe the trained policy found in --out")
    return parser


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else default_config()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.shots is not None:
        over["adapt.k_shots"] = args.shots
    if args.gamma is not None:
        over["adapt.gamma"] = args.gamma
    if args.rollouts is not None:
        over["grpo.group_size"] = args.rollouts
    if args.out is not None:
        over["output_dir"] = str(args.out)
    return cfg.with_overrides(**over) if over else cfg


_STOP = {"gen": "gen", "train-source": "train-source", "adapt": "adapt", "eval": "eval-adapted", "run": None}


def _print_reports(res) -> None:
    rows = []
    if res.source_on_source is not None:
        rows.append(report_row("source-only (source test)", res.source_on_source))
    if res.source_only is not None:
        rows.append(report_row("source-only (target test)", res.source_only))
    if res.adapted is not None:
        rows.append(report_row("adapted (target test)", res.adapted))
    if rows:
        print(format_table(rows, REPORT_HEADER))


def _cmd_pipeline(args, cfg) -> int:
    res = run_experiment(cfg, stop_after=_STOP[args.command], progress=lambda m: print(m, file=sys.stderr))
    _print_reports(res)
    if res.stabilization:
        print("rollout-std stabilization (median |sigma_hat change|):")
        for k, v in res.stabilization.items():
            print(f"  G {k}: {v:.5f}")
    print(f"artifacts in {res.out_dir}")
    return EXIT_OK


def _cmd_theorem(args, cfg) -> int:
    from urpa.theory import theorem_suite

    results = theorem_suite(cfg.seed)
    rows = [(r.name, r.value, r.threshold, "PASS" if r.passed else "FAIL") for r in results]
    ok = all(r.passed for r in results)
    out = Path(cfg.output_dir)
    if args.probe:
        res = run_experiment(cfg, progress=lambda m: print(m, file=sys.stderr))
        steps = list(res.stabilization.values())
        shrinking = all(b < a for a, b in zip(steps, steps[1:]))
        rows.append(("probe_stabilization", float(steps[-1]) if steps else float("nan"), "decreasing in G",
                     "PASS" if shrinking else "FAIL"))
        ok = ok and shrinking
    print(format_table(rows, ("check", "value", "threshold", "result")))
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "theorem_checks.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps({"check": r[0], "value": r[1], "threshold": r[2], "result": r[3]}) + "\n")
    return EXIT_OK if ok else EXIT_CHECK


def _cmd_ablate(args, cfg) -> int:
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    seeds = [cfg.seed + i for i in range(args.n_seeds)]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = run_ablation(cfg, variants, seeds, cache_dir=out / "source_cache",
                         progress=lambda m: print(m, file=sys.stderr))
    write_ablation(out / "ablation.jsonl", table)
    rows = [(table.source_only.name, table.source_only.miou, table.source_only.delta_miou, table.source_only.r_at[0.5])]
    rows += [(r.name, r.miou, r.delta_miou, r.r_at[0.5]) for r in table.rows]
    print(format_table(rows, ("variant", "mIoU", "delta vs urpa", "R@0.5")))
    for k, v in table.spreads.items():
        print(f"{k} sweep mIoU spread: {v:.4f}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"urpa: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _resolve_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"urpa: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "theorem":
            return _cmd_theorem(args, cfg)
        if args.command == "ablate":
            return _cmd_ablate(args, cfg)
        return _cmd_pipeline(args, cfg)
    except ConfigError as exc:
        print(f"urpa: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (AdaptationError, DatasetFormatError, FloatingPointError, OSError, ValueError) as exc:
        print(f"urpa: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
