"""Command-line entry point: one subcommand per experiment stage.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 acceptance
check failure (``pipeline --check``).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

OUT_ENV = "VLMTRACE_OUT"
EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_CHECK = 0, 2, 3, 4
_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the global seed")
    common.add_argument("--out", type=Path,
                        help=f"run directory (default ${OUT_ENV} or ./runs, then the config hash)")
    common.add_argument("--threads", type=int, help="BLAS thread count")
    common.add_argument("--format", choices=("csv", "json"), default="csv", help="report format")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="vlmtrace", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("pretrain", parents=[common], help="train the released model")
    f = sub.add_parser("forge", parents=[common], help="forge trigger bundles")
    f.add_argument("--method", choices=("ordinary", "rna", "pla"), action="append",
                   help="attack method (repeatable; default all)")
    t = sub.add_parser("finetune", parents=[common], help="fine-tune suspects and build unrelated models")
    t.add_argument("--strategy", choices=("full", "lora"), action="append",
                   help="fine-tuning strategy (repeatable; default all)")
    t.add_argument("--no-unrelated", action="store_true", help="skip the unrelated control models")
    sub.add_parser("verify", parents=[common], help="TMR of every suspect")
    sub.add_parser("robust", parents=[common], help="transform x surgery robustness sweep")
    sub.add_parser("ablate", parents=[common], help="model-lr, epoch and sample-count ablations")
    r = sub.add_parser("report", parents=[common], help="summary table and figures")
    r.add_argument("--no-figures", action="store_true")
    pl = sub.add_parser("pipeline", parents=[common], help="run every stage")
    pl.add_argument("--check", action="store_true", help="exit 4 if any acceptance check fails")
    pl.add_argument("--no-figures", action="store_true")
    return p


def _set_threads(n: int | None) -> None:
    # must happen before numpy is imported
    if n is not None:
        for var in _THREAD_VARS:
            os.environ[var] = str(n)


def _print_summary(summary: dict, fmt: str) -> None:
    import json

    rows = []
    for m, h in summary.get("headline", {}).items():
        rows.append(("tmr_finetuned", m, repr(float(h["mean"]))))
    for name, ok in summary.get("checks", {}).items():
        rows.append(("check", name, "pass" if ok else "fail"))
    if fmt == "json":
        print(json.dumps([dict(zip(("kind", "name", "value"), r)) for r in rows], indent=1))
    else:
        print("kind,name,value")
        for r in rows:
            print(",".join(r))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _set_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from . import pipeline as pl
    from .io import CheckpointError

    try:
        cfg = pl.load_config(args.config) if args.config else pl.ExperimentConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or Path(os.environ.get(OUT_ENV, "runs")) / cfg.hash()

    try:
        if args.command == "pipeline":
            summary = pl.run_pipeline(cfg, out, fmt=args.format, figures=not args.no_figures)
            _print_summary(summary, args.format)
            failed = [k for k, ok in summary["checks"].items() if not ok]
            if args.check and failed:
                print(f"acceptance checks failed: {', '.join(failed)}", file=sys.stderr)
                return EXIT_CHECK
            return EXIT_OK
        run = pl.Run(cfg, out, args.format)
        run.out.mkdir(parents=True, exist_ok=True)
        if args.command == "pretrain":
            pl.stage_pretrain(run)
            pl.write_config_snapshot(run)
        elif args.command == "forge":
            pl.stage_forge(run, args.method)
        elif args.command == "finetune":
            pl.stage_finetune(run, args.strategy, unrelated=not args.no_unrelated)
        elif args.command == "verify":
            pl.stage_verify(run)
        elif args.command == "robust":
            pl.stage_robust(run)
        elif args.command == "ablate":
            pl.stage_ablate(run)
        elif args.command == "report":
            _print_summary(pl.stage_report(run, figures=not args.no_figures), args.format)
    except pl.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except pl.StageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_STAGE
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"stage {args.command!r} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    print(f"{args.command}: {out}", file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
