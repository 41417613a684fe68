"""Command-line entry points."""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .bootstrap import (
    BootstrapPlan,
    PlanningError,
    SwitchConfig,
    exact_fit_registers,
    select_refinement_plan,
    snr_sizes,
)
from .forecast import ForecastError, predict_window
from .harness import (
    OPTIMAL,
    STRATEGIES,
    HarnessError,
    SimulationRun,
    StrategyParams,
    frozen_plan_run,
    median_costs,
    simulate,
)
from .query import build_chains, finest_plan, load_queries
from .report import emit_comparison, emit_report, fmt
from .workload import (
    BimodalConfig,
    WorkloadConfig,
    cost_matrices_for_trace,
    load_cost_history,
    load_trace,
    query_shapes,
    save_cost_history,
    synth_bimodal,
    write_trace,
)


def _switch(path) -> SwitchConfig:
    return SwitchConfig.load(path) if path else SwitchConfig()


def _train_windows(args, n: int) -> int:
    t = args.train_windows if args.train_windows is not None else min(10, n - 1)
    if not 0 < t < n:
        raise SystemExit(f"error: --train-windows must be in 1..{n - 1} for {n} windows")
    return t


def cmd_gen_cost_matrix(args) -> int:
    queries = load_queries(args.queries)
    cfg = WorkloadConfig(args.window_sec, args.speedup,
                         {"reduce": args.reduce_bits, "distinct": args.distinct_bits})
    history = cost_matrices_for_trace(queries, load_trace(args.trace), cfg)
    save_cost_history(history, args.out)
    print(f"{len(history)} windows, {sum(len(cm) for cm in history)} entries -> {args.out}")
    return 0


def cmd_bootstrap(args) -> int:
    history = load_cost_history(args.cost)
    switch = _switch(args.switch)
    shapes = query_shapes(history[0])
    if args.refinement == "tom":
        plan = select_refinement_plan(shapes, history, switch)
    else:
        plan = finest_plan(shapes)
    chains = build_chains(plan, shapes)
    if args.sizing == "snr":
        regs = snr_sizes(switch)
    else:
        ops = [op for ch in chains for op in ch.operators]
        med = median_costs(history, ops)
        regs, _ = exact_fit_registers(chains, {op: med[op].B for op in ops}, switch)
    BootstrapPlan(plan, regs, tuple(chains)).save(args.out)
    print(f"plan {plan.to_json()} with {len(regs.registers)} registers -> {args.out}")
    return 0


def cmd_simulate(args) -> int:
    history = load_cost_history(args.cost)
    switch = _switch(args.switch)
    shapes = query_shapes(history[0])
    params = StrategyParams(overprovision=args.overprovision, warmup=args.warmup,
                            mode=args.mode, seed=args.seed)
    if args.strategy in OPTIMAL:
        train = args.train_windows or 0
        run = simulate(args.strategy, history[train:], shapes, switch, 0, params)
    else:
        train = _train_windows(args, len(history))
        if args.plan:
            plan = BootstrapPlan.load(args.plan, shapes)
            run = frozen_plan_run(args.strategy, plan, history, shapes, switch, train, params)
        else:
            run = simulate(args.strategy, history, shapes, switch, train, params)
    run.save(args.out)
    report_dir = Path(args.report_dir) if args.report_dir else Path(args.out).with_suffix("")
    emit_report(run, report_dir, svg=not args.no_svg)
    print(f"{run.strategy}: median {fmt(run.median)} total {fmt(run.total)} tuples "
          f"over {len(run.windows)} windows -> {args.out}")
    return 0


def cmd_compare(args) -> int:
    runs = [SimulationRun.load(p) for p in args.runs]
    emit_comparison(runs, args.out, svg=not args.no_svg)
    for run in runs:
        print(f"{run.strategy:16s} median {fmt(run.median)} total {fmt(run.total)}")
    return 0


def cmd_synth(args) -> int:
    if args.scenario != "bimodal":
        raise SystemExit(f"error: unknown scenario {args.scenario!r}")
    cfg = BimodalConfig(windows=args.windows, seed=args.seed)
    records = synth_bimodal(cfg)
    write_trace(records, args.out)
    print(f"{len(records)} packets -> {args.out}")
    return 0


def cmd_predict_eval(args) -> int:
    history = load_cost_history(args.cost)
    train = _train_windows(args, len(history))
    if train < 2:
        raise SystemExit("error: forecasting needs at least two training windows")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["window", "op", "pred_bits", "true_bits", "rel_error"])
        for n in range(train, len(history)):
            pred = predict_window(history[:n])
            true = history[n]
            for op, e in sorted(pred.entries.items()):
                t = true[op].B
                err = abs(e.B - t) / t if t else (0.0 if e.B == 0 else float("inf"))
                w.writerow([true.window, op.label(), e.B, t, fmt(err)])
    print(f"predictions for {len(history) - train} windows -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="telemplan", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-cost-matrix", help="execute refined queries over a trace")
    g.add_argument("--queries", required=True)
    g.add_argument("--trace", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--window-sec", type=float, default=3.0)
    g.add_argument("--speedup", type=float, default=1.0)
    g.add_argument("--reduce-bits", type=int, default=32)
    g.add_argument("--distinct-bits", type=int, default=1)
    g.set_defaults(func=cmd_gen_cost_matrix)

    b = sub.add_parser("bootstrap", help="compute the compile-time plan")
    b.add_argument("--cost", required=True)
    b.add_argument("--switch")
    b.add_argument("--out", required=True)
    b.add_argument("--refinement", choices=("tom", "finest"), default="tom")
    b.add_argument("--sizing", choices=("snr", "exact-fit"), default="snr")
    b.set_defaults(func=cmd_bootstrap)

    s = sub.add_parser("simulate", help="replay windows under one strategy")
    s.add_argument("--strategy", required=True, choices=STRATEGIES)
    s.add_argument("--plan")
    s.add_argument("--cost", required=True)
    s.add_argument("--switch")
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("average", "best", "worst"), default="average")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--overprovision", type=float, default=2.0)
    s.add_argument("--train-windows", type=int)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--report-dir")
    s.add_argument("--no-svg", action="store_true")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("compare", help="combine runs into one report")
    c.add_argument("--runs", nargs="+", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--no-svg", action="store_true")
    c.set_defaults(func=cmd_compare)

    y = sub.add_parser("synth", help="write a synthetic trace")
    y.add_argument("--scenario", default="bimodal")
    y.add_argument("--out", required=True)
    y.add_argument("--seed", type=int, default=7)
    y.add_argument("--windows", type=int, default=6)
    y.set_defaults(func=cmd_synth)

    e = sub.add_parser("predict-eval", help="one-step forecast error per operator")
    e.add_argument("--cost", required=True)
    e.add_argument("--train-windows", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_predict_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PlanningError, HarnessError, ForecastError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
