"""Command line entry point: ``csvgd {simulate,estimate,metrics,export}``.

Exit codes: 0 success, 1 configuration or input error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .experiment import (ConfigError, ExperimentConfig, RunReport, SchemaError, export_plot_data,
                         generate_synthetic, run_experiment, score_particles, read_table)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def _threads(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("threads must be >= 0 (0 = all cores)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="csvgd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "simulate": "generate a synthetic dataset from the config's data.synthetic block",
        "estimate": "run the configured estimator and write particles, traces and metrics",
        "metrics": "score a particles.csv (from --particles or the run in --out) against the data",
        "export": "write plot tables for the run directory given by --out",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", type=Path, required=name != "export")
        p.add_argument("--seed", type=_seed, default=None, help="overrides the config seed")
        p.add_argument("--threads", type=_threads, default=1,
                       help="numeric worker threads; 0 = all cores, 1 = deterministic")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (defaults to output_dir from the config)")
        if name == "metrics":
            p.add_argument("--particles", type=Path, default=None)
    return parser


def _out_dir(args, config: ExperimentConfig | None) -> Path:
    if args.out is not None:
        return args.out
    if config is None:
        raise ConfigError("--out is required without --config")
    return Path(config.output_dir)


def _simulate(args, config: ExperimentConfig) -> None:
    out = _out_dir(args, config)
    data = generate_synthetic(config, seed=args.seed)
    data.write(out, [p.label for p in config.model.build().param_spec])
    dataclasses.replace(config, seed=config.seed if args.seed is None else args.seed,
                        output_dir=str(out)).dump(out / "config.yaml")
    print(f"wrote {len(data.train)} training and "
          f"{0 if data.test is None else len(data.test)} test trajectories to {out}")


def _estimate(args, config: ExperimentConfig) -> None:
    out = _out_dir(args, config)
    report = run_experiment(config, seed=args.seed, out_dir=out)
    if report.metrics is not None:
        print(json.dumps(report.metrics.as_dict()))
    print(f"{report.method}: {len(report.particles)} particles in {report.wall_clock:.1f}s -> {out}")


def _metrics(args, config: ExperimentConfig) -> None:
    path = args.particles or (_out_dir(args, config) / "particles.csv")
    try:
        labels, particles = read_table(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read particles from {path}: {exc}") from exc
    expected = [p.label for p in config.model.build().param_spec]
    if labels != expected:
        raise ConfigError(f"{path}: columns {labels} do not match the config's {expected}")
    report = score_particles(config, particles)
    print(json.dumps(report.as_dict()))


def _export(args, config: ExperimentConfig | None) -> None:
    run_dir = _out_dir(args, config)
    for p in export_plot_data(RunReport.load(run_dir), run_dir / "plots"):
        print(p)


COMMANDS = {"simulate": _simulate, "estimate": _estimate, "metrics": _metrics, "export": _export}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    limits = (threadpool_limits(limits=args.threads) if args.threads
              else contextlib.nullcontext())
    try:
        config = ExperimentConfig.load(args.config) if args.config else None
        with limits:
            COMMANDS[args.command](args, config)
    except (ConfigError, SchemaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
