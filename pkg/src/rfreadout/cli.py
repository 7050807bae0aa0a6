"""Command-line entry point: ``rfreadout {simulate,analyze,reproduce,calibrate-noise}``."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .harness import (FIGURE_TAGS, PRESETS, ExperimentConfig, StageError, load_config, load_preset,
                      reproduce_figure, run_experiment)


def _config(ref: str) -> ExperimentConfig:
    """A YAML path, or the name of a shipped preset."""
    if Path(ref).exists():
        return load_config(ref)
    if ref in PRESETS:
        return load_preset(ref)
    raise StageError("config", f"no such config file or preset: {ref}")


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "cycles", None) is not None:
        cfg = replace(cfg, n_cycles=args.cycles)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.threads is not None:
        cfg = replace(cfg, threads=args.threads)
    if getattr(args, "keep_traces", None) is not None:
        cfg = replace(cfg, analysis=replace(cfg.analysis, keep_traces=args.keep_traces))
    return cfg


def _cmd_simulate(args) -> dict:
    cfg = _apply_overrides(_config(args.config), args)
    m = run_experiment(cfg)
    return {"output_dir": cfg.output_dir, "summary": m.summary}


def _cmd_analyze(args) -> dict:
    """Re-run signal synthesis, detection and estimation on an archived event table."""
    from .detect import write_detections
    from .dynamics import read_timelines
    from .estimate import fit_lifetime, write_json
    from .harness import _analyze_all, _ionizing

    cfg = _apply_overrides(_config(args.config), args)
    try:
        timelines = read_timelines(args.events)
    except (OSError, ValueError) as exc:
        raise StageError("load", str(exc)) from exc
    ionizing = _ionizing(timelines)
    results = [r for r, _ in _analyze_all(cfg, ionizing, set(), cfg.threads)]
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.csv", results)
    summary = {"n_ionizing_cycles": len(ionizing), "n_detected": sum(r.detected for r in results)}
    if args.t_min is not None:
        t = [r.t_ion for r in results if r.detected]
        try:
            for method in ("mle", "lsq"):
                summary[f"lifetime_{method}"] = fit_lifetime(t, args.t_min, method).to_dict()
        except ValueError as exc:
            raise StageError("estimate", str(exc)) from exc
    write_json(out / "summary.json", summary)
    return summary


def _cmd_reproduce(args) -> dict:
    return reproduce_figure(args.tag, args.out or ".", seed=args.seed or 0, scale=args.scale)


def _cmd_calibrate(args) -> dict:
    from .signals import calibrate_noise, calibrate_snr_law

    cfg = _apply_overrides(_config(args.config), args)
    trace = replace(cfg.trace_config(), noise_sigma=0.0, contrast_fluctuation=0.0)
    law = calibrate_snr_law(args.snr_1us, args.t0, trace)
    sigma = calibrate_noise(args.snr_1us, trace.contrast, law, t0=args.t0,
                            n_windows=args.windows, seed=cfg.seed)
    return {"noise_sigma": sigma, "noise_sigma_analytic": law.noise_sigma,
            "contrast_fluctuation": law.contrast_fluctuation, "snr_1us": args.snr_1us,
            "t0": args.t0}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rfreadout", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, cycles=True):
        p.add_argument("--seed", type=int, help="master seed")
        if cycles:
            p.add_argument("--cycles", type=int, help="number of measurement cycles")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker processes (0: all cores)")

    p = sub.add_parser("simulate", help="run a campaign from a config file or preset")
    p.add_argument("config", help=f"YAML file or preset ({', '.join(PRESETS)})")
    common(p)
    p.add_argument("--keep-traces", type=int, help="event traces to store (-1: all)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("analyze", help="detect and fit the cycles of an events.csv")
    p.add_argument("events")
    p.add_argument("--config", default="calibrated", help="readout config or preset")
    p.add_argument("--t-min", type=float, help="lifetime threshold (s)")
    common(p, cycles=False)
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("reproduce", help="write the CSV tables of one figure")
    p.add_argument("tag", help=", ".join(FIGURE_TAGS))
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--scale", type=float, default=1.0, help="Monte Carlo size multiplier")
    p.set_defaults(func=_cmd_reproduce)

    p = sub.add_parser("calibrate-noise", help="noise parameters reproducing an SNR law")
    p.add_argument("config")
    common(p, cycles=False)
    p.add_argument("--snr-1us", type=float, default=9.6)
    p.add_argument("--t0", type=float, default=0.5e-6)
    p.add_argument("--windows", type=int, default=100_000)
    p.set_defaults(func=_cmd_calibrate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.command == "reproduce" and args.tag not in FIGURE_TAGS:
        ap.error(f"unknown figure tag {args.tag!r}; choose from {', '.join(FIGURE_TAGS)}")
    try:
        result = args.func(args)
    except StageError as exc:
        print(f"rfreadout: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
