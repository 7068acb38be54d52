"""Command-line entry point: ``cfcl run``, ``cfcl sweep`` and ``cfcl selftest``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from typing import List, Optional

from . import metrics
from .config import MODES, PRESETS, SimConfig, field_names, parse_config
from .errors import CFCLError, ConfigError
from .federation import RunResult, run

log = logging.getLogger("cfcl")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="start from a preset")
    p.add_argument("--figures", action="store_true", help="render PNG figures next to the CSVs")
    p.add_argument("-v", "--verbose", action="store_true")
    g = p.add_argument_group("config overrides (any SimConfig field)")
    for name in field_names():
        g.add_argument("--" + name.replace("_", "-"), dest=name, default=argparse.SUPPRESS,
                       metavar=name.upper())


def _overrides(args, exclude=()) -> dict:
    names = set(field_names()) - set(exclude)
    return {k: v for k, v in vars(args).items() if k in names}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cfcl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="simulate one configuration")
    _add_config_flags(p_run)

    p_sweep = sub.add_parser("sweep", help="cross product of modes and seeds")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--modes", required=True, help="comma list, e.g. fedavg,cfcl_explicit")
    p_sweep.add_argument("--seeds", required=True, help="comma list of integer seeds")
    p_sweep.add_argument("--jobs", type=int, default=1, help="worker processes")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def run_prefix(cfg: SimConfig) -> str:
    return f"{cfg.mode}-seed{cfg.seed}"


def write_run_outputs(result: RunResult, out_dir: str, figures: bool = False) -> List[str]:
    """Metrics CSV, trace JSON and config echo for one run, each written atomically."""
    cfg = result.config
    base = os.path.join(out_dir, run_prefix(cfg))
    trace = result.trace_json()
    if result.final_alignment is not None:
        trace["final_alignment"] = result.final_alignment.tolist()
    paths = [base + "-metrics.csv", base + "-trace.json", base + "-config.json"]
    metrics.atomic_write(paths[1], json.dumps(trace, sort_keys=True) + "\n")
    metrics.atomic_write(paths[2], json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metrics.atomic_write(paths[0], result.metrics_csv())
    if figures:
        from . import plotting

        paths.append(plotting.plot_accuracy({cfg.mode: result.rows}, base + "-accuracy.png"))
        if result.final_alignment is not None:
            paths.append(plotting.plot_alignment(result.final_alignment, base + "-alignment.png",
                                                 title=cfg.mode))
    return paths


def cmd_run(args) -> int:
    cfg = parse_config(args.config, _overrides(args), args.preset)
    result = run(cfg)
    for p in write_run_outputs(result, cfg.out, args.figures):
        print(p)
    return EXIT_OK


def _parse_list(text: str, cast, what: str):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise ConfigError(what, "needs at least one value")
    try:
        return [cast(s) for s in items]
    except ValueError:
        raise ConfigError(what, f"cannot parse {text!r}") from None


def _sweep_one(job):
    path, overrides, preset = job
    cfg = parse_config(path, overrides, preset)
    return run(cfg)


THRESHOLD_COSTS = ("t", "d2d_bytes_cum", "uplink_bytes_cum", "delay_seconds_cum")


def summarize(results: List[RunResult]) -> List[dict]:
    """Cost at which each run first reaches each of its accuracy thresholds."""
    out = []
    for r in results:
        for th in r.config.thresholds:
            row = {"mode": r.config.mode, "seed": r.config.seed, "threshold": th}
            for col in THRESHOLD_COSTS:
                key = col.replace("_cum", "")
                row[key] = metrics.time_to_threshold(((x[col], x["accuracy"]) for x in r.rows), th)
            out.append(row)
    return out


def cmd_sweep(args) -> int:
    modes = _parse_list(args.modes, str, "modes")
    seeds = _parse_list(args.seeds, int, "seeds")
    bad = [m for m in modes if m not in MODES]
    if bad:
        raise ConfigError("modes", f"unknown modes {bad}; choose from {MODES}")
    base = _overrides(args, exclude=("mode", "seed"))
    jobs = [(args.config, {**base, "mode": m, "seed": s}, args.preset) for m in modes for s in seeds]
    # validate every config before spending any compute
    cfgs = [parse_config(*j) for j in jobs]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [run(c) for c in cfgs]

    out = cfgs[0].out
    long_rows = [{"mode": r.config.mode, "seed": r.config.seed, **row}
                 for r in results for row in r.rows]
    summary = summarize(results)
    for r in results:
        write_run_outputs(r, os.path.join(out, "runs"))
    sweep_csv = os.path.join(out, "sweep.csv")
    summary_csv = os.path.join(out, "summary.csv")
    metrics.atomic_write(sweep_csv, metrics.rows_to_csv(long_rows,
                                                        ("mode", "seed") + metrics.METRIC_COLUMNS))
    metrics.atomic_write(summary_csv, metrics.rows_to_csv(
        summary, ("mode", "seed", "threshold", "t", "d2d_bytes", "uplink_bytes", "delay_seconds")))
    print(sweep_csv)
    print(summary_csv)
    if args.figures:
        from . import plotting

        curves = {}
        for m in modes:
            runs = [r.rows for r in results if r.config.mode == m]
            curves[m] = [{**runs[0][k], "accuracy": sorted(x[k]["accuracy"] for x in runs)[len(runs) // 2]}
                         for k in range(len(runs[0]))]
        print(plotting.plot_accuracy(curves, os.path.join(out, "accuracy.png")))
        print(plotting.plot_cost_to_threshold(summary, os.path.join(out, "cost_to_threshold.png")))
    return EXIT_OK


def cmd_selftest(args) -> int:
    from . import selftest

    results = selftest.run_checks()
    print(selftest.format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        print("FAILED: " + ", ".join(failed))
        return EXIT_FAIL
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": cmd_run, "sweep": cmd_sweep, "selftest": cmd_selftest}[args.command]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"cfcl: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CFCLError, OSError) as exc:
        print(f"cfcl: error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
