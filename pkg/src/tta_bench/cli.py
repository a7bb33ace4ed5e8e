"""Command-line front end: pretrain, run, profile, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config, load_train_test, scenario_cells
from .corruptions import specs_from
from .evaluation import accuracy, run_grid, summarize
from .io import JsonlSink, atomic_write_text, read_jsonl
from .model import TrainingDivergence, build_model, file_digest, load_model, pretrain_source, save_model
from .profiler import emit_profile_table, profile_methods
from .report import summary_csv, write_report
from .scenarios import make_target_domain, scenario1

log = logging.getLogger("tta_bench")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _write_resolved(cfg: RunConfig, out: Path) -> None:
    atomic_write_text(out / "config.json", json.dumps({"digest": cfg.digest(), "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n")


def cmd_pretrain(cfg: RunConfig) -> Path:
    train, test = load_train_test(cfg.dataset)
    m = cfg.model
    init = build_model(m.arch, train.class_count, m.init_seed)
    history: list[float] = []
    trained = pretrain_source(init, train, m.epochs, m.lr, m.train_seed, m.batch_size, m.momentum, history=history)
    path = save_model(trained, cfg.model_path())
    clean = accuracy(load_model(path), test, "clean_test")
    logfile = {
        "config_digest": cfg.digest(),
        "model_digest": file_digest(path),
        "epoch_losses": history,
        "clean_test_accuracy": clean.xi,
        "clean_test_n": clean.n,
    }
    atomic_write_text(path.with_suffix(".train.json"), json.dumps(logfile, indent=2, sort_keys=True) + "\n")
    log.info("wrote %s (clean accuracy %.4f)", path, clean.xi)
    return path


def _require_model(cfg: RunConfig):
    path = cfg.model_path()
    if not path.exists():
        raise ConfigError(f"model file {path} does not exist; run 'pretrain' first")
    return load_model(path)


def cmd_run(cfg: RunConfig) -> tuple[Path, Path]:
    model = _require_model(cfg)
    out = cfg.output_path()
    _, test = load_train_test(cfg.dataset)
    cells = scenario_cells(cfg, test)
    _write_resolved(cfg, out)
    sink = JsonlSink(out / "records.jsonl")
    records, rows = run_grid(cells, cfg.methods, model, cfg.adapt_config(), cfg.seeds, out / "models", sink, cfg.digest())
    csv_path = atomic_write_text(out / "summary.csv", summary_csv(rows, cfg.summary_timing))
    failed = sum(r.failed for r in records)
    if failed:
        log.warning("%d of %d runs fell back to the source model", failed, len(records))
    return sink.path, csv_path


def cmd_profile(cfg: RunConfig) -> tuple[Path, Path]:
    model = _require_model(cfg)
    out = cfg.output_path()
    _, test = load_train_test(cfg.dataset)
    d_t = make_target_domain(test, specs_from([tuple(p) for p in cfg.scenario.corruption]), cfg.scenario.domain_seed)
    if cfg.profile.size > len(d_t):
        raise ConfigError(f"profile.size {cfg.profile.size} exceeds the target domain size {len(d_t)}")
    split = scenario1(d_t, cfg.profile.size, cfg.profile.seed)
    adapt = cfg.adapt_config()
    adapt.seed = cfg.profile.seed
    # sequential on purpose: concurrent runs would blur peak attribution
    reports = profile_methods(cfg.methods, model, split, adapt, out / "models")
    return emit_profile_table(reports, out / "profile")


def cmd_report(records_dir) -> list[Path]:
    records_dir = Path(records_dir)
    path = records_dir / "records.jsonl"
    if not path.exists():
        raise ConfigError(f"no records file at {path}")
    records = read_jsonl(path)
    if not records:
        raise ValueError("empty record set")
    written = write_report(records, records_dir / "figures")
    # refresh the summary from the records alone so the report works on copied or merged runs
    from .evaluation import ExperimentRecord

    rows = summarize([ExperimentRecord.from_dict(r) for r in records])
    atomic_write_text(records_dir / "figures" / "summary.csv", summary_csv(rows))
    return written


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tta-bench", description="Periodic test-time adaptation benchmark.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("pretrain", "train the source model"), ("run", "run the scenario grid"), ("profile", "profile memory and CPU per method")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="override one config key, e.g. scenario.sizes=[64,512]")
    rp = sub.add_parser("report", help="draw charts from recorded runs")
    rp.add_argument("records_dir", nargs="?", help="directory holding records.jsonl")
    rp.add_argument("--config", help="take the records directory from this config's output_dir")
    rp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report" and args.records_dir:
            target = Path(args.records_dir)
        else:
            cfg = load_config(args.config, args.overrides)
            target = cfg.output_path()
        if args.command == "pretrain":
            print(cmd_pretrain(cfg))
        elif args.command == "run":
            for pth in cmd_run(cfg):
                print(pth)
        elif args.command == "profile":
            for pth in cmd_profile(cfg):
                print(pth)
        else:
            for pth in cmd_report(target):
                print(pth)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergence, ValueError, OSError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
