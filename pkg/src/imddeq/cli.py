"""Command-line entry point: ``python -m imddeq <verb> [--config PATH] ...``.

Exit codes: 0 success, 1 invalid input, 2 experiment failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from . import checkpoint, experiments, selftest
from .experiments import ConfigError, ExperimentConfig

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2

VERBS = ("sweep-dispersion", "sweep-snr", "quant-pareto", "pipeline-report", "selftest",
         "train", "evaluate")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="imddeq", description="Adaptive CNN equalizer experiments")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="INI experiment file (defaults apply without one)")
    p.add_argument("--seed", type=int, help="base seed, overrides the config")
    p.add_argument("--out", help="output path (CSV, or the checkpoint for train)")
    p.add_argument("--workers", type=int, default=1, help="parallel seeds")
    p.add_argument("--checkpoint", help="model file for evaluate (overrides the config)")
    p.add_argument("--inject-fault", choices=selftest.FAULTS, help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["output"] = args.out
    if args.checkpoint is not None:
        changes["checkpoint"] = args.checkpoint
    if changes:
        cfg = replace(cfg, **changes)
    return cfg


def _emit(text: str, path: str | None) -> None:
    if not path:
        sys.stdout.write(text)


def _selftest(args) -> int:
    failed = False
    for name, ok, detail, seconds in selftest.run(args.inject_fault):
        print(f"{'PASS' if ok else 'FAIL'}  {name:<18} {detail} ({seconds:.1f} s)")
        failed |= not ok
    return EXIT_FAILED if failed else EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if args.verb == "selftest":
        return _selftest(args)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.verb == "sweep-dispersion":
            rows = experiments.sweep_dispersion(cfg, args.workers)
            text = experiments.write_csv(rows, experiments.DISPERSION_COLUMNS,
                                         experiments.DISPERSION_SCHEMA, cfg.output)
            _emit(text, cfg.output)
            return EXIT_FAILED if any(r["status"] != "ok" for r in rows) else EXIT_OK
        if args.verb == "sweep-snr":
            rows = experiments.sweep_snr(cfg, args.workers)
            text = experiments.write_csv(rows, experiments.SNR_COLUMNS, experiments.SNR_SCHEMA,
                                         cfg.output)
            _emit(text, cfg.output)
            return EXIT_FAILED if any(r["status"] != "ok" for r in rows) else EXIT_OK
        if args.verb == "quant-pareto":
            rows = experiments.quant_pareto(cfg)
            text = experiments.write_csv(rows, experiments.PARETO_COLUMNS,
                                         experiments.PARETO_SCHEMA, cfg.output)
            _emit(text, cfg.output)
            return EXIT_FAILED if any(r["status"] != "ok" for r in rows) else EXIT_OK
        if args.verb == "pipeline-report":
            rows, summary = experiments.pipeline_report(cfg)
            text = experiments.write_csv(rows, experiments.PIPELINE_COLUMNS,
                                         experiments.PIPELINE_SCHEMA, cfg.output)
            _emit(text, cfg.output)
            print(summary, file=sys.stderr if not cfg.output else sys.stdout)
            return EXIT_OK
        if args.verb == "train":
            if not cfg.output:
                print("error: train needs --out for the checkpoint", file=sys.stderr)
                return EXIT_INVALID
            model = experiments.train_model(cfg, cfg.seed)
            checkpoint.save(model, cfg.output)
            return EXIT_OK
        if args.verb == "evaluate":
            if not cfg.checkpoint:
                print("error: evaluate needs a checkpoint", file=sys.stderr)
                return EXIT_INVALID
            model = checkpoint.load(cfg.checkpoint)
            rows = experiments.evaluate_model(cfg, model, cfg.seed)
            text = experiments.write_csv(rows, experiments.EVALUATE_COLUMNS,
                                         experiments.EVALUATE_SCHEMA, cfg.output)
            _emit(text, cfg.output)
            return EXIT_OK
    except (ConfigError, checkpoint.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as experiment failure
        logging.getLogger(__name__).exception("experiment failed")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_INVALID
