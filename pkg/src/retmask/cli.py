"""Command line: one subcommand per stage, plus ``run-all`` and ``compare``.

Exit codes: 0 ok, 1 stage aborted (e.g. every synthesized pair failed),
2 config error, 3 missing prerequisite, 4 divergence.
The output directory is ``--out``, else the config's ``output_dir``; relative
paths resolve against ``$RETMASK_OUTPUT_ROOT`` when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, make_config, validate
from .model import DivergenceError
from .pipeline import (STAGES, DirtyOutputError, PipelineError, PrerequisiteError, Run, StageAborted,
                       compare, set_threads, write_compare)

EXIT_OK, EXIT_ABORTED, EXIT_CONFIG, EXIT_PREREQ, EXIT_DIVERGED = 0, 1, 2, 3, 4
OUTPUT_ROOT_ENV = "RETMASK_OUTPUT_ROOT"

log = logging.getLogger("retmask")


def _overrides(args) -> dict:
    out = {}
    if getattr(args, "seed", None) is not None:
        out["seed"] = args.seed
    if getattr(args, "rejected_sampler", None):
        out["synth.rejected_sampler"] = args.rejected_sampler
    if getattr(args, "mask_strategy", None):
        out["ablate.strategy"] = args.mask_strategy
    if getattr(args, "tau", None) is not None:
        out["detect.tau"] = args.tau
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else make_config()
    over = _overrides(args)
    if over:
        cfg = cfg.with_overrides(**over)
        validate(cfg)
    return cfg


def resolve_out(args, cfg: RunConfig) -> Path:
    out = Path(args.out or cfg["output_dir"])
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    return out


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="run config (JSON)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--force", action="store_true", help="overwrite stale stage outputs")
    p.add_argument("--rejected-sampler", help="synth rejected sampler")
    p.add_argument("--mask-strategy", help="ablation mask strategy")
    p.add_argument("--tau", type=float, help="retrieval-score threshold")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set pretrain.max_steps=500")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="retmask", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))
    _common(sub.add_parser("run-all", help="run every stage in order"))
    c = sub.add_parser("compare", help="tabulate completed runs")
    c.add_argument("runs", nargs="+")
    c.add_argument("--output", help="CSV path (default: stdout)")
    d = sub.add_parser("init-config", help="write the default config")
    d.add_argument("path")
    return ap


def _print_table(rows: list[dict]):
    if not rows:
        return
    cols = list(rows[0])
    cells = [[f"{r[c]:.4f}" if isinstance(r[c], float) else str(r[c]) for c in cols] for r in rows]
    widths = [max(len(c), *(len(x[i]) for x in cells)) for i, c in enumerate(cols)]
    print("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
    for x in cells:
        print("  ".join(v.ljust(w) for v, w in zip(x, widths)))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    set_threads()
    try:
        if args.command == "init-config":
            make_config().save(args.path)
            return EXIT_OK
        if args.command == "compare":
            rows = compare(args.runs)
            if args.output:
                write_compare(rows, args.output)
            _print_table(rows)
            return EXIT_OK
        cfg = resolve_config(args)
        run = Run(resolve_out(args, cfg), cfg, log=log.info)
        if args.command == "run-all":
            run.run_all(force=args.force)
        else:
            run.run(args.command, force=args.force)
        return EXIT_OK
    except (ConfigError, DirtyOutputError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PREREQ
    except StageAborted as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_ABORTED
    except DivergenceError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
