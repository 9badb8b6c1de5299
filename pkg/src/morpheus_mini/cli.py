"""Command line front end.

Three subcommands:

  run      simulate a scenario and emit the per-window CSV
  verify   differential check: optimized engine vs pristine baseline
  inspect  analysis report, guards, and pass log after a warmup run

Stdout carries only machine-readable output (CSV for run, report text
for inspect); progress and summaries go to stderr so redirected output
stays byte-stable.
"""
import argparse
import os
import sys
from typing import List, Optional

from .analysis import render_report
from .instrumentation import SamplingPolicy
from .optimizer import PASS_ORDER, PassConfig
from .runtime import (Engine, EngineConfig, EquivalenceError,
                      differential_outputs, windows_csv)
from .workload import SCENARIO_NAMES, Segment, build_scenario, parse_schedule

PROFILES = ("high", "high_alt", "low", "none")


def _add_common(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--scenario", required=True, choices=SCENARIO_NAMES)
    sp.add_argument("--profile", default="high", choices=PROFILES)
    sp.add_argument("--schedule", metavar="FILE",
                    help="JSON segment schedule; overrides --profile/--packets")
    sp.add_argument("--packets", type=int, default=100_000)
    sp.add_argument("--seed", type=int, default=None,
                    help="default: $MORPHEUS_MINI_SEED, else 0")
    sp.add_argument("--mode", default="adaptive",
                    choices=("adaptive", "baseline", "naive"))
    sp.add_argument("--executor", default="compiled",
                    choices=("compiled", "interp"))
    sp.add_argument("--sampling", type=float, default=None,
                    metavar="PROB", help="instrumentation sampling probability")
    sp.add_argument("--period", type=int, default=50_000,
                    help="packets between periodic recompiles")
    sp.add_argument("--latency", type=int, default=1_000,
                    help="simulated compile latency in packets")
    sp.add_argument("--workers", type=int, default=2)
    sp.add_argument("--window", type=int, default=5_000)
    sp.add_argument("--disable-pass", action="append", default=[],
                    metavar="NAME", choices=list(PASS_ORDER))
    sp.add_argument("--disable-table-opt", action="append", default=[],
                    metavar="TABLE")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("MORPHEUS_MINI_SEED")
    return int(env) if env else 0


def _segments(args) -> List[Segment]:
    if args.schedule:
        with open(args.schedule) as fh:
            return parse_schedule(fh.read())
    return [Segment(args.profile, args.packets)]


def _config(args, mode: Optional[str] = None, **overrides) -> EngineConfig:
    sampling = SamplingPolicy()
    if args.sampling is not None:
        if not 0.0 < args.sampling <= 1.0:
            raise SystemExit(2)
        sampling = SamplingPolicy(probability=args.sampling)
    passes = PassConfig(disabled_passes=frozenset(args.disable_pass),
                        disabled_tables=frozenset(args.disable_table_opt),
                        sampling=sampling)
    return EngineConfig(mode=mode or args.mode, executor=args.executor,
                        num_workers=args.workers, compile_period=args.period,
                        compile_latency=args.latency, window=args.window,
                        seed=_seed(args), sampling=sampling, passes=passes,
                        **overrides)


def cmd_run(args) -> int:
    eng = Engine(build_scenario(args.scenario), _config(args))
    report = eng.run(_segments(args), seed=_seed(args))
    csv = windows_csv(report)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(csv)
    else:
        sys.stdout.write(csv)
    print(f"packets={report.packets} mean_cost={report.mean_cost:.4f} "
          f"specialized={report.specialized_fraction:.4f} "
          f"recompiles={report.recompiles} swaps={report.swaps} "
          f"guard_fallbacks={report.guard_fallbacks} "
          f"final_version={report.final_version}", file=sys.stderr)
    return 0


def cmd_verify(args) -> int:
    segments = _segments(args)
    seed = _seed(args)
    diff = differential_outputs(
        lambda: build_scenario(args.scenario), segments, seed,
        _config(args, mode="baseline"), _config(args, mode=args.mode))
    if diff is not None:
        print(f"divergence: {diff}")
        return 1
    if args.shadow:
        eng = Engine(build_scenario(args.scenario),
                     _config(args, shadow_check=True))
        try:
            eng.run(segments, seed=seed)
        except EquivalenceError as e:
            print(f"shadow divergence: {e}")
            return 1
    n = sum(s.packets for s in segments)
    print(f"equivalent: {args.scenario} packets={n} seed={seed} "
          f"mode={args.mode} shadow={'on' if args.shadow else 'off'}")
    return 0


def cmd_inspect(args) -> int:
    eng = Engine(build_scenario(args.scenario), _config(args))
    eng.run(_segments(args), seed=_seed(args))
    out = [render_report(eng.analysis), ""]
    if eng.artifact is None:
        out.append("no optimized version installed (warmup too short?)")
    else:
        out.append(f"live version {eng.version} "
                   f"(ro_epoch {eng.artifact.ro_epoch})")
        out.append("guards:")
        for g in eng.artifact.guards:
            tabs = ",".join(g.tables)
            gen = "" if g.generation is None else f" generation={g.generation}"
            out.append(f"  {g.guard_id} kind={g.kind} tables={tabs}{gen}")
        seq, log = eng.pass_history[-1]
        out.append(f"pass log (compile at packet {seq}):")
        out.extend(f"  {line}" for line in log)
    print("\n".join(out))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    ap = argparse.ArgumentParser(
        prog="morpheus-mini",
        description="run-time specializing engine for a packet pipeline IR")
    sub = ap.add_subparsers(dest="command", required=True)

    sp_run = sub.add_parser("run", help="simulate and emit window CSV")
    _add_common(sp_run)
    sp_run.add_argument("--out", metavar="FILE", help="CSV path (default stdout)")
    sp_run.set_defaults(fn=cmd_run)

    sp_ver = sub.add_parser("verify", help="differential equivalence check")
    _add_common(sp_ver)
    sp_ver.add_argument("--shadow", action="store_true",
                        help="also cross-check each packet while running")
    sp_ver.set_defaults(fn=cmd_verify)

    sp_ins = sub.add_parser("inspect",
                            help="analysis, guards, and pass decisions")
    _add_common(sp_ins)
    sp_ins.set_defaults(fn=cmd_inspect)

    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
