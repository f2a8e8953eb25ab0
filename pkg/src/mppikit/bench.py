"""Benchmarks: solve time versus sample count, and the DMD-MPC step-size sweep.

Command line::

    mppikit-bench timing    [--config F] [--samples 128,256] [--trials 30] [--strategy auto] ...
    mppikit-bench dmd-sweep [--config F] [--samples 64,4096] [--gammas 0.2,1.0] [--steps 1000] ...

Exit status: 0 on success, 2 on a configuration error, 3 on a runtime error.
"""
from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from .controllers import make_controller
from .core import ConfigError, ScenarioConfig, load_scenario, replace
from .engine import AUTO, FUSED, SPLIT, STRATEGIES
from .sampling import NoiseCache
from .scenarios import CIRCLE_TRACK, DIFF_DRIVE, build_closed_loop, initial_state

DEFAULT_TIMING_SAMPLES = (128, 256, 512, 1024, 2048, 4096, 6144, 8192, 16384)
DEFAULT_TIMING_TRIALS = 30
MIN_TIMING_TRIALS = 30
TIMING_WARMUP = 2

DEFAULT_GAMMAS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_SWEEP_SAMPLES = (64, 256, 1024, 4096)
DEFAULT_SWEEP_TRIALS = 50
DEFAULT_STEPS = 1000

TIMING_HEADER = ("samples", "method", "strategy", "mean_ms", "std_ms", "trials")
SWEEP_HEADER = ("samples", "gamma", "mean_cost", "std_cost", "mean_ms", "trials")


class BenchError(RuntimeError):
    pass


@dataclass(frozen=True)
class TimingRecord:
    samples: int
    method: str
    strategy: str          # strategy actually used; "auto:<kind>" when auto-selected
    mean_ms: float
    std_ms: float
    trials: int
    median_ms: float = field(default=math.nan, compare=False)

    def __post_init__(self):
        if self.std_ms < 0:
            raise ValueError("std_ms must be >= 0")


@dataclass(frozen=True)
class SweepRecord:
    samples: int
    gamma: float
    mean_cost: float
    std_cost: float
    mean_ms: float
    trials: int

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")


def _std(values) -> float:
    return statistics.stdev(values) if len(values) > 1 else 0.0


def bench_timing(config: ScenarioConfig | None = None, sample_counts=DEFAULT_TIMING_SAMPLES,
                 trials: int = DEFAULT_TIMING_TRIALS, *, strategies=(SPLIT, FUSED, AUTO),
                 workers: int | None = None, seed: int = 0, clock=time.perf_counter,
                 progress=None) -> list[TimingRecord]:
    """Wall time of compute_control for each (M, strategy).

    Controller construction, kernel compilation, auto-tuning and TIMING_WARMUP
    solves happen before the timed trials. Every solve starts from the
    scenario's initial state.
    """
    if trials < MIN_TIMING_TRIALS:
        raise ValueError(f"timing needs at least {MIN_TIMING_TRIALS} trials, got {trials}")
    config = config or DIFF_DRIVE
    x0 = initial_state(config)
    records = []
    for M in sample_counts:
        for strategy in strategies:
            if strategy not in STRATEGIES:
                raise ValueError(f"unknown strategy {strategy!r}")
            ctrl = make_controller(replace(config, num_samples=int(M)), strategy=strategy,
                                   workers=workers, seed=seed)
            for _ in range(TIMING_WARMUP):
                ctrl.compute_control(x0)
            times = []
            for _ in range(trials):
                t0 = clock()
                ctrl.compute_control(x0)
                times.append((clock() - t0) * 1e3)
            used = ctrl.engine.strategy
            label = f"auto:{used}" if strategy == AUTO else used
            rec = TimingRecord(int(M), ctrl.name, label, statistics.fmean(times), _std(times), trials,
                               statistics.median(times))
            records.append(rec)
            if progress:
                progress(rec)
    return records


def bench_dmd_sweep(gammas=DEFAULT_GAMMAS, sample_counts=DEFAULT_SWEEP_SAMPLES, steps: int = DEFAULT_STEPS,
                    trials: int = DEFAULT_SWEEP_TRIALS, seed: int = 0, *, config: ScenarioConfig | None = None,
                    strategy: str = AUTO, workers: int | None = None, clock=None,
                    progress=None) -> list[SweepRecord]:
    """Closed-loop DMD-MPC runs for every (M, gamma) over `trials` seeds.

    Trial i uses sampler seed `seed + i` for every gamma, so gamma = 1 rows
    reproduce plain MPPI at the same seeds. The gamma runs of one (M, seed)
    advance in lockstep and share each noise draw. Cost fields depend only on
    (config, seed); mean_ms is wall time unless `clock` is injected.
    """
    gammas = [float(g) for g in gammas]
    sample_counts = [int(m) for m in sample_counts]
    if not gammas or not sample_counts:
        raise ValueError("gamma and sample grids must be non-empty")
    if steps < 1 or trials < 1:
        raise ValueError("steps and trials must be >= 1")
    config = config or CIRCLE_TRACK
    duration = steps * config.dt
    records = []
    for M in sample_counts:
        costs = {g: [] for g in gammas}
        solve_ms = {g: [] for g in gammas}
        for i in range(trials):
            cache = NoiseCache()
            loops = []
            for g in gammas:
                cfg = replace(config, controller="dmd", num_samples=M,
                              controller_params={**dict(config.controller_params), "gamma": g})
                ctrl, plant, sim = build_closed_loop(cfg, seed=seed + i, strategy=strategy,
                                                     workers=workers, cache=cache)
                if clock is not None:
                    ctrl.clock = clock
                loops.append(plant.iter_control_loop(sim, duration))
            logs = [None] * len(gammas)
            for step_logs in zip(*loops):
                logs = step_logs
            for g, log in zip(gammas, logs):
                costs[g].append(log.total_cost)
                solve_ms[g].append(statistics.fmean(log.solve_ms))
        for g in gammas:
            rec = SweepRecord(M, g, statistics.fmean(costs[g]), _std(costs[g]),
                              statistics.fmean(solve_ms[g]), trials)
            records.append(rec)
            if progress:
                progress(rec)
    return records


def argmin_gamma(records: list[SweepRecord]) -> dict[int, float]:
    """Lowest-mean-cost gamma per sample count (the smaller gamma wins exact ties)."""
    best: dict[int, SweepRecord] = {}
    for r in records:
        b = best.get(r.samples)
        if b is None or r.mean_cost < b.mean_cost or (r.mean_cost == b.mean_cost and r.gamma < b.gamma):
            best[r.samples] = r
    return {m: r.gamma for m, r in best.items()}


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def emit_csv(records, path, kind: str | None = None):
    """Write records as CSV. `kind` ("timing" or "sweep") is required for an empty list."""
    if kind is None:
        if not records:
            raise ValueError("kind is required to write an empty record list")
        kind = "timing" if isinstance(records[0], TimingRecord) else "sweep"
    header = {"timing": TIMING_HEADER, "sweep": SWEEP_HEADER}[kind]
    try:
        fh = sys.stdout if path in (None, "-") else open(path, "w", newline="")
    except OSError as exc:
        raise BenchError(f"cannot write CSV to {path}: {exc.strerror or exc}") from exc
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in records:
            w.writerow([_fmt(getattr(r, col)) for col in header])
    finally:
        if fh is not sys.stdout:
            fh.close()


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return vals


def _float_list(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not (v >= 0 and math.isfinite(v)) for v in vals):
        raise argparse.ArgumentTypeError(f"expected finite values >= 0, got {text!r}")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mppikit-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="scenario YAML (defaults to the built-in scenario)")
        p.add_argument("--samples", type=_int_list, help="comma-separated sample counts")
        p.add_argument("--trials", type=int)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, help="worker threads for rollouts")
        p.add_argument("--out", help="CSV output path (stdout when omitted)")

    t = sub.add_parser("timing", help="solve time versus sample count (diff-drive scenario)")
    common(t)
    t.add_argument("--strategy", choices=STRATEGIES, help="time one strategy (default: all three)")

    s = sub.add_parser("dmd-sweep", help="DMD-MPC step-size sweep (circle-track scenario)")
    common(s)
    s.add_argument("--gammas", type=_float_list, help="comma-separated step sizes")
    s.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    s.add_argument("--strategy", choices=STRATEGIES, default=AUTO)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)

    def log(msg):
        print(msg, file=sys.stderr, flush=True)

    try:
        config = load_scenario(args.config) if args.config else None
        if args.workers is not None and args.workers < 1:
            raise ConfigError("--workers must be >= 1", key="workers")
        if args.command == "timing":
            trials = DEFAULT_TIMING_TRIALS if args.trials is None else args.trials
            if trials < MIN_TIMING_TRIALS:
                raise ConfigError(f"--trials must be >= {MIN_TIMING_TRIALS}, got {trials}", key="trials")
            strategies = (args.strategy,) if args.strategy else (SPLIT, FUSED, AUTO)
            records = bench_timing(config, args.samples or DEFAULT_TIMING_SAMPLES, trials,
                                   strategies=strategies, workers=args.workers, seed=args.seed,
                                   progress=lambda r: log(f"M={r.samples} {r.strategy}: {r.mean_ms:.3f} ms"))
            emit_csv(records, args.out, "timing")
        else:
            trials = DEFAULT_SWEEP_TRIALS if args.trials is None else args.trials
            if trials < 1 or args.steps < 1:
                raise ConfigError("--trials and --steps must be >= 1", key="trials")
            records = bench_dmd_sweep(args.gammas or DEFAULT_GAMMAS, args.samples or DEFAULT_SWEEP_SAMPLES,
                                      args.steps, trials, args.seed, config=config, strategy=args.strategy,
                                      workers=args.workers,
                                      progress=lambda r: log(f"M={r.samples} gamma={r.gamma}: "
                                                             f"{r.mean_cost:.6g} +- {r.std_cost:.3g}"))
            emit_csv(records, args.out, "sweep")
            for m, g in argmin_gamma(records).items():
                log(f"argmin gamma at M={m}: {g}")
    except ConfigError as exc:
        log(f"config error: {exc}")
        return 2
    except Exception as exc:  # noqa: BLE001 - any solver failure maps to the runtime exit code
        log(f"error: {type(exc).__name__}: {exc}")
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
