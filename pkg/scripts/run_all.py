"""Pretrain the source model once, then run every scenario sweep, the profiler and the charts.

    python scripts/run_all.py                 # everything into ./runs
    python scripts/run_all.py s1 s4           # only some sweeps
    TTA_BENCH_OUTPUT_ROOT=/data python scripts/run_all.py

Model paths in the configs are relative to each config's output directory,
so all sweeps share runs/source/source.bota.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from tta_bench.cli import main as cli
from tta_bench.config import load_config

HERE = Path(__file__).resolve().parent / "configs"
SWEEPS = {"s1": "s1_size_sweep.json", "s2": "s2_categories.json", "s3": "s3_domains.json", "s4": "s4_stacks.json"}


def _run(*argv: str) -> None:
    rc = cli(list(argv))
    if rc:
        sys.exit(rc)


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("sweeps", nargs="*", choices=[*SWEEPS, "profile"], help="default: all sweeps and the profile")
    p.add_argument("--seeds", help="override the seed list, e.g. [1,2]")
    p.add_argument("-v", "--verbose", action="store_true")
    args = p.parse_args()
    verbose = ["-v"] if args.verbose else []
    extra = ["--set", f"seeds={args.seeds}"] if args.seeds else []

    source_cfg = str(HERE / "source.json")
    if not load_config(source_cfg).model_path().exists():
        _run(*verbose, "pretrain", "--config", source_cfg)
    for name in args.sweeps or [*SWEEPS, "profile"]:
        if name == "profile":
            _run(*verbose, "profile", "--config", str(HERE / "profile.json"))
            continue
        cfg = str(HERE / SWEEPS[name])
        _run(*verbose, "run", "--config", cfg, *extra)
        _run(*verbose, "report", "--config", cfg)


if __name__ == "__main__":
    main()
