#!/usr/bin/env python3
"""
run_all.py - Run the full periodic homogenization pipeline.
"""

import argparse
import os
import subprocess
import sys

ROOT = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, os.path.join(ROOT, "scripts"))
from artifacts import collect_pass_flags, ensure_dir  # noqa: E402
from config import (  # noqa: E402
    DEFAULT_PATHS, EXIT_CONFIG_ERROR, EXIT_STRICT_FAILURE, STAGES, dump_config, load_config, resolve_output_dir,
)
from errors import ConfigParse  # noqa: E402

STAGE_SCRIPTS = {
    "cell": "01_cell.py",
    "tails": "02_tails.py",
    "spectrum": "03_spectrum.py",
    "expansion": "04_expansion.py",
}
PARALLEL_STAGES = ("tails", "spectrum", "expansion")


def run(cmd):
    print("\n>>", " ".join(cmd))
    result = subprocess.run(cmd)
    if result.returncode != 0:
        sys.exit(result.returncode)


def parse_args(argv=None):
    p = argparse.ArgumentParser(description="Periodic homogenization pipeline")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="Run the stages of one experiment config")
    r.add_argument("config", help="Experiment TOML (see presets/)")
    r.add_argument("--strict", action="store_true", help="Exit 3 when any pass/fail flag fails")
    r.add_argument("--jobs", type=int, default=1, help="Worker processes for eps rows and strip solves")
    r.add_argument("--out", default=None, help="Output directory (beats HOMOG_OUT_DIR and the config)")
    r.add_argument("--only", choices=STAGES, action="append", help="Run only this stage (repeatable)")
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigParse as e:
        print(f"{e.code}: {e}", file=sys.stderr)
        sys.exit(EXIT_CONFIG_ERROR)

    out_dir = resolve_output_dir(cfg, args.out)
    config_path = os.path.join(out_dir, DEFAULT_PATHS["config"])
    ensure_dir(config_path)
    with open(config_path, "w", encoding="utf-8") as f:
        f.write(dump_config(cfg))
    print(f"Saved config -> {config_path}")

    stages = [s for s in STAGES if s in (args.only or cfg.study.stages)]
    for stage in stages:
        cmd = [sys.executable, os.path.join(ROOT, "scripts", STAGE_SCRIPTS[stage]),
               "--config", config_path, "--out", out_dir]
        if stage in PARALLEL_STAGES:
            cmd += ["--jobs", str(args.jobs)]
        run(cmd)

    flags = collect_pass_flags(out_dir)
    print("\nPass flags:")
    for name, ok in flags.items():
        print(f"  {name:<32} {'pass' if ok else 'FAIL'}")
    if args.strict and not all(flags.values()):
        failed = [name for name, ok in flags.items() if not ok]
        print(f"\n❌ Strict mode: {len(failed)} flag(s) failed: {', '.join(failed)}")
        sys.exit(EXIT_STRICT_FAILURE)

    print("\n✅ Pipeline finished successfully")


if __name__ == "__main__":
    main()
