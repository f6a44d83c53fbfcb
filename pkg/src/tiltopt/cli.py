"""Command-line interface: ``tiltopt <command> [options]``.

Exit status is 0 on success, 2 for invalid input (bad arguments, unreadable
or malformed files) and 1 for failures while running.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .harness import (
    ExperimentRecord,
    correction_loop,
    design_pattern,
    estimate_record,
    evaluate_patterns,
    fit_noise,
    load_pattern,
    simulate_experiments,
)
from .statespace import ModelConfig, default_config


class ValidationError(Exception):
    pass


def _load_config(path) -> ModelConfig:
    if path is None:
        return default_config()
    try:
        return ModelConfig.from_json(path)
    except FileNotFoundError:
        raise ValidationError(f"config file not found: {path}") from None
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"invalid config {path}: {exc}") from None


def _load_record(path) -> ExperimentRecord:
    try:
        return ExperimentRecord.from_json(path)
    except FileNotFoundError:
        raise ValidationError(f"experiment file not found: {path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"invalid experiment file {path}: {exc}") from None


def _load_pattern(path):
    try:
        return load_pattern(path)
    except FileNotFoundError:
        raise ValidationError(f"pattern file not found: {path}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"invalid pattern file {path}: {exc}") from None


def _parse_kind(kind: str, horizon: int) -> tuple[str, int]:
    if kind in ("greedy", "lissajous", "random", "rho"):
        return kind, horizon
    if kind.startswith("rho-"):
        try:
            return "rho", int(kind[4:])
        except ValueError:
            pass
    raise ValidationError(f"unknown pattern kind {kind!r}")


def _parse_ratio(text: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in text.split(":"))
    except ValueError:
        raise ValidationError(f"ratio must look like 3:2, got {text!r}") from None
    return a, b


def _write(path, data: dict) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")


def cmd_init_config(args) -> dict:
    cfg = default_config(n_steps=args.N)
    out = args.out or "config.json"
    cfg.to_json(out)
    return {"config": str(out), "dim": cfg.dim}


def cmd_optimize(args) -> dict:
    cfg = _load_config(args.config)
    kind, horizon = _parse_kind(args.kind, args.H)
    if args.N < 1:
        raise ValidationError("--N must be at least 1")
    if kind == "rho" and not 1 <= horizon <= args.N:
        raise ValidationError("--H must satisfy 1 <= H <= N")
    if args.starts < 1:
        raise ValidationError("--starts must be at least 1")
    result = design_pattern(
        cfg,
        kind,
        args.N,
        horizon=horizon,
        seed=args.seed,
        n_starts=args.starts,
        n_warm=args.warm,
        ratio=_parse_ratio(args.ratio),
    )
    out = Path(args.out or "pattern.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_json(out)
    if args.csv:
        result.sequence.to_csv(args.csv)
    return {"pattern": str(out), "steps": len(result.sequence), "final_cost": result.cost}


def cmd_simulate(args) -> dict:
    cfg = _load_config(args.config)
    if args.pattern is None:
        raise ValidationError("--pattern is required")
    if args.runs < 1:
        raise ValidationError("--runs must be at least 1")
    seq = _load_pattern(args.pattern)
    records = simulate_experiments(cfg, seq, args.runs, args.seed)
    out = Path(args.out or "runs")
    out.mkdir(parents=True, exist_ok=True)
    width = len(str(len(records) - 1))
    paths = []
    for i, rec in enumerate(records):
        path = out / f"run_{i:0{width}d}.json"
        rec.to_json(path)
        paths.append(str(path))
    return {"records": paths}


def cmd_estimate(args) -> dict:
    record = _load_record(args.experiment)
    cfg = _load_config(args.config) if args.config else record.config
    report = estimate_record(record, cfg, smooth=not args.no_smooth)
    out = Path(args.out or "estimate.json")
    _write(out, report.to_dict())
    report.to_csv(out.with_suffix(".csv"))
    return {
        "estimate": str(out),
        "final": {
            lab: {"estimate": float(v), "std": float(s)}
            for lab, v, s in zip(report.labels, report.final_estimate, report.final_std)
        },
    }


def cmd_emfit(args) -> dict:
    if not args.experiments:
        raise ValidationError("at least one experiment file is required")
    records = [_load_record(p) for p in args.experiments]
    cfg = _load_config(args.config) if args.config else records[0].config
    if len({len(r.tilts) for r in records}) > 1:
        raise ValidationError("experiment records must have the same length")
    result = fit_noise(records, cfg)
    out = Path(args.out or "em.json")
    _write(out, result.to_dict())
    if args.update_config:
        cfg.measurement_noise = result.sigma_eps
        cfg.to_json(args.update_config)
    return {
        "em": str(out),
        "sigma_eps": result.sigma_eps.tolist(),
        "log_likelihood": result.log_likelihood,
        "iterations": result.iterations,
    }


def cmd_evaluate(args) -> dict:
    cfg = _load_config(args.config)
    if not args.patterns:
        raise ValidationError("at least one pattern file is required")
    if args.runs < 2:
        raise ValidationError("--runs must be at least 2")
    patterns = {}
    for p in args.patterns:
        name = Path(p).stem
        if name in patterns:
            name = str(p)
        seq = _load_pattern(p)
        patterns[name] = seq
    report = evaluate_patterns(cfg, patterns, args.runs, args.seed)
    out = Path(args.out or "evaluation")
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "report.json")
    report.write_csv(out)
    return {
        "report": str(out / "report.json"),
        "patterns": {
            p.name: {
                "final_cost": float(p.cost_trajectory[-1]),
                "nees_mean": p.nees_mean,
                "nees_band_99": list(p.nees_band),
                "std_ratio_min": float(np.min(p.std_ratio)),
                "std_ratio_max": float(np.max(p.std_ratio)),
            }
            for p in report.patterns
        },
    }


def cmd_correct(args) -> dict:
    record = _load_record(args.experiment)
    cfg = _load_config(args.config) if args.config else record.config
    if not record.simulated:
        raise ValidationError("the experiment record has no ground truth")
    if args.rounds < 1:
        raise ValidationError("--rounds must be at least 1")
    report = correction_loop(record, args.rounds, args.seed, cfg)
    out = Path(args.out or "correction.json")
    _write(out, report.to_dict())
    return {"correction": str(out), "median_relative_to_initial": report.decay.tolist()}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tiltopt", description="Tilt-pattern design and aberration estimation."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="model configuration JSON (default: built-in)")
        p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--json", action="store_true", help="print a JSON summary")

    p = sub.add_parser("init-config", help="write the default configuration")
    common(p, config=False)
    p.add_argument("--N", type=int, default=60, help="steps covered by the bound ramp")
    p.set_defaults(func=cmd_init_config)

    p = sub.add_parser("optimize", help="design a tilt pattern")
    common(p)
    p.add_argument("--kind", default="greedy", help="greedy, rho, rho-H, lissajous, random")
    p.add_argument("--N", type=int, default=60, help="pattern length")
    p.add_argument("--H", type=int, default=1, help="look-ahead horizon for greedy/rho")
    p.add_argument("--starts", type=int, default=1000, help="optimizer starts per step")
    p.add_argument("--warm", type=int, default=100, help="starts seeded from the previous step")
    p.add_argument("--ratio", default="3:2", help="Lissajous frequency ratio")
    p.add_argument("--csv", help="also write the tilts as CSV")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("simulate", help="simulate experiments for a pattern")
    common(p)
    p.add_argument("--pattern", help="pattern JSON or CSV")
    p.add_argument("--runs", type=int, default=1, help="number of experiments")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="filter and smooth one experiment")
    common(p)
    p.add_argument("experiment", help="experiment record JSON")
    p.add_argument("--no-smooth", action="store_true", help="skip the RTS smoother")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("emfit", help="fit the measurement noise by EM")
    common(p)
    p.add_argument("experiments", nargs="+", help="experiment record JSONs (pooled)")
    p.add_argument("--update-config", help="write a config with the fitted noise")
    p.set_defaults(func=cmd_emfit)

    p = sub.add_parser("evaluate", help="Monte-Carlo evaluation of patterns")
    common(p)
    p.add_argument("patterns", nargs="+", help="pattern JSON or CSV files")
    p.add_argument("--runs", type=int, default=500, help="Monte-Carlo runs per pattern")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("correct", help="simulated estimate-and-correct rounds")
    common(p)
    p.add_argument("experiment", help="simulated record with truth")
    p.add_argument("--rounds", type=int, default=3, help="correction rounds")
    p.set_defaults(func=cmd_correct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    try:
        summary = args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.json:
        print(json.dumps(summary, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
