"""Planner strategies and the per-window simulation loop.

Every strategy freezes a refinement plan and a register configuration from
training windows, then walks the test windows in order.  Static strategies
keep one mapping for the whole run; dynamic ones recompute the mapping each
window from true or forecast costs.  Load is always charged against the
window's true costs.
"""
from __future__ import annotations

import itertools
import json
import statistics
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .bootstrap import (
    BootstrapPlan,
    RegisterConfig,
    SwitchConfig,
    enumerate_query_plans,
    exact_fit_registers,
    min_mean_tom_curve,
    select_refinement_plan,
    snr_sizes,
)
from .forecast import (
    ForecastModel,
    Predictor,
    desp_predictor,
    fit_clusters,
    fit_scaling,
)
from .load import LoadConfig, OperatorLoad, assignment_load, operator_load
from .mapping import (
    GuardError,
    build_goa_instance,
    check_guard,
    walk_feasible,
    greedy_map,
    to_opref_mapping,
)
from .query import DependencyChain, OpRef, QueryShape, RefinementPlan, build_chains, finest_plan
from .workload import CostEntry, CostMatrix

STATIC = ("MAX_DP", "SONATA_STATIC", "SONATA_OP")
DYNAMIC = ("MAX_DP_D", "DYNAMIQ_ORACLE", "DYNAMIQ_PRED", "DYNAMIQ_RAND", "DYNAMIQ_SNR", "DYNAMIQ_TOM")
OPTIMAL = ("OPTIMAL_SONATA", "OPTIMAL_MAX_DP")
STRATEGIES = STATIC + DYNAMIC + OPTIMAL

# cross products of per-query plans larger than this fall back to per-k TOM minima
MAX_PLAN_COMBOS = 256


class HarnessError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyParams:
    overprovision: float = 2.0      # SONATA_OP memory factor
    warmup: int = 10                # windows of history before forecasting
    mode: str = "average"
    key_bits: int = 32
    seed: int = 0
    registers: RegisterConfig | None = None     # fixed register layout override
    predictor: Predictor | None = None          # replaces the fitted forecaster
    fit_scaling: bool = True
    register_pool: tuple[RegisterConfig, ...] = ()  # extra layouts for OPTIMAL_*

    @property
    def load_cfg(self) -> LoadConfig:
        return LoadConfig(self.key_bits, self.mode)


@dataclass(frozen=True)
class WindowReport:
    window: int
    sp_load: Fraction
    operators: tuple[OperatorLoad, ...]
    assignment: Mapping[int, OpRef]
    chains: tuple[DependencyChain, ...]
    registers: RegisterConfig
    prediction_error: Mapping[OpRef, float] | None = None

    def to_json(self) -> dict:
        out = {
            "window": self.window,
            "sp_load": str(self.sp_load),
            "chains": [[list(op) for op in ch.operators] for ch in self.chains],
            "registers": self.registers.to_json(),
            "assignment": [[r, list(op)] for r, op in sorted(self.assignment.items())],
            "operators": [{"op": list(o.op), "alloc_bits": o.alloc_bits, "req_bits": o.req_bits,
                           "rho": str(o.rho), "load": str(o.load)} for o in self.operators],
        }
        if self.prediction_error is not None:
            out["prediction_error"] = [[list(k), round(v, 9)]
                                       for k, v in sorted(self.prediction_error.items())]
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> WindowReport:
        chains = tuple(DependencyChain(n, tuple(OpRef(*o) for o in ch))
                       for n, ch in enumerate(obj["chains"]))
        rows = tuple(OperatorLoad(OpRef(*o["op"]), o["alloc_bits"], o["req_bits"],
                                  Fraction(o["rho"]), Fraction(o["load"])) for o in obj["operators"])
        err = obj.get("prediction_error")
        return cls(obj["window"], Fraction(obj["sp_load"]), rows,
                   {r: OpRef(*op) for r, op in obj["assignment"]}, chains,
                   RegisterConfig.from_json(obj["registers"]),
                   None if err is None else {OpRef(*k): v for k, v in err})


@dataclass(frozen=True)
class SimulationRun:
    strategy: str
    plan: BootstrapPlan
    windows: tuple[WindowReport, ...]
    config: Mapping = field(default_factory=dict)
    seed: int = 0

    def loads(self) -> list[Fraction]:
        return [w.sp_load for w in self.windows]

    @property
    def total(self) -> Fraction:
        return sum(self.loads(), Fraction(0))

    @property
    def median(self) -> float:
        return float(statistics.median(self.loads())) if self.windows else 0.0

    def to_json(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "config": dict(self.config),
                "plan": self.plan.to_json(), "windows": [w.to_json() for w in self.windows]}

    @classmethod
    def from_json(cls, obj: Mapping) -> SimulationRun:
        return cls(obj["strategy"], BootstrapPlan.from_json(obj["plan"]),
                   tuple(WindowReport.from_json(w) for w in obj["windows"]),
                   obj.get("config", {}), obj.get("seed", 0))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> SimulationRun:
        with open(path) as fh:
            return cls.from_json(json.load(fh))


# --- helpers -----------------------------------------------------------------

def median_costs(history: Sequence[CostMatrix], ops: Sequence[OpRef], factor=1) -> dict[OpRef, CostEntry]:
    """Per-component low median over the windows; memory scaled by ``factor``."""
    out = {}
    for op in ops:
        b = statistics.median_low([cm[op].B for cm in history])
        n_in = statistics.median_low([cm[op].n_in for cm in history])
        n_out = min(statistics.median_low([cm[op].n_out for cm in history]), n_in)
        out[op] = CostEntry(round(b * Fraction(factor)), n_in, n_out)
    return out


def _ops(chains: Sequence[DependencyChain]) -> list[OpRef]:
    return [op for ch in chains for op in ch.operators]


def _greedy(chains, registers, costs) -> dict[int, OpRef]:
    inst = build_goa_instance(chains, registers, costs)
    return to_opref_mapping(greedy_map(inst, enhanced=True), inst)


def _window(w: int, chains, registers, mapping, true: CostMatrix, cfg: LoadConfig,
            pred_error=None) -> WindowReport:
    est = assignment_load(mapping, chains, true.entries, registers, cfg)
    return WindowReport(w, est.total, est.per_operator, dict(mapping), tuple(chains),
                        registers, pred_error)


def training_load(chains, registers, mapping, training: Sequence[CostMatrix], cfg: LoadConfig) -> Fraction:
    return sum((assignment_load(mapping, chains, cm.entries, registers, cfg).total
                for cm in training), Fraction(0))


def candidate_plans(shapes: Sequence[QueryShape], history: Sequence[CostMatrix],
                    switch: SwitchConfig) -> list[RefinementPlan]:
    """All per-query plan combinations when few; otherwise one TOM-minimal plan per operator count."""
    shapes = sorted(shapes, key=lambda s: s.qid)
    per_query = [enumerate_query_plans(s) for s in shapes]
    combos = 1
    for p in per_query:
        combos *= len(p)
    if combos <= MAX_PLAN_COMBOS:
        plans = [RefinementPlan({s.qid: seq for s, seq in zip(shapes, pick)})
                 for pick in itertools.product(*per_query)]
    else:
        plans = [pt.plan for pt in min_mean_tom_curve(shapes, history, switch)]
    return sorted(set(plans), key=lambda p: p.sort_key())


def exact_fit_static(plan: RefinementPlan, shapes, training, switch: SwitchConfig,
                     factor=1, cfg: LoadConfig = LoadConfig(),
                     registers: RegisterConfig | None = None):
    """Registers sized to the (scaled) median training demand, plus the better
    of the packing's own mapping and a greedy mapping on median costs."""
    chains = build_chains(plan, shapes)
    ops = _ops(chains)
    med = median_costs(training, ops, factor)
    options = []
    if registers is None:
        registers, fit_map = exact_fit_registers(chains, {op: med[op].B for op in ops}, switch)
        options.append(fit_map)
    options.insert(0, _greedy(chains, registers, med))
    scored = [(training_load(chains, registers, m, training, cfg), n, m) for n, m in enumerate(options)]
    best = min(scored, key=lambda t: (t[0], t[1]))
    return chains, registers, best[2], best[0]


def sonata_static(shapes, training, switch, factor=1, cfg: LoadConfig = LoadConfig(),
                  registers: RegisterConfig | None = None):
    best = None
    for plan in candidate_plans(shapes, training, switch):
        chains, regs, mapping, score = exact_fit_static(plan, shapes, training, switch,
                                                        factor, cfg, registers)
        if best is None or score < best[4]:
            best = (plan, chains, regs, mapping, score)
    return best[:4]


# --- runners -----------------------------------------------------------------

def _config(switch: SwitchConfig, params: StrategyParams, n_train: int, **extra) -> dict:
    out = {"switch": switch.to_json(), "mode": params.mode, "key_bits": params.key_bits,
           "train_windows": n_train}
    out.update(extra)
    return out


def run_static(strategy: str, training: Sequence[CostMatrix], test: Sequence[CostMatrix],
               shapes: Sequence[QueryShape], switch: SwitchConfig,
               params: StrategyParams = StrategyParams()) -> SimulationRun:
    if strategy not in STATIC:
        raise HarnessError(f"{strategy} is not a static strategy")
    if not training:
        raise HarnessError("need at least one training window")
    cfg = params.load_cfg
    if strategy == "MAX_DP":
        plan = finest_plan(shapes)
        chains, regs, mapping, _ = exact_fit_static(plan, shapes, training, switch, 1, cfg,
                                                    params.registers)
        factor = 1
    else:
        factor = params.overprovision if strategy == "SONATA_OP" else 1
        plan, chains, regs, mapping = sonata_static(shapes, training, switch, factor, cfg,
                                                    params.registers)
    windows = tuple(_window(cm.window, chains, regs, mapping, cm, cfg) for cm in test)
    return SimulationRun(strategy, BootstrapPlan(plan, regs, tuple(chains)), windows,
                         _config(switch, params, len(training), overprovision=float(factor)),
                         params.seed)


def bootstrap_for(strategy: str, training, shapes, switch: SwitchConfig, params: StrategyParams):
    """Refinement plan and register layout used by a dynamic strategy."""
    cfg = params.load_cfg
    if strategy == "MAX_DP_D":
        plan, regs = finest_plan(shapes), snr_sizes(switch)
    elif strategy in ("DYNAMIQ_ORACLE", "DYNAMIQ_PRED"):
        plan, regs = select_refinement_plan(shapes, training, switch), snr_sizes(switch)
    elif strategy == "DYNAMIQ_RAND":
        plan, _, regs, _ = sonata_static(shapes, training, switch, 1, cfg)
    elif strategy == "DYNAMIQ_SNR":
        plan, _, _, _ = sonata_static(shapes, training, switch, 1, cfg)
        regs = snr_sizes(switch)
    elif strategy == "DYNAMIQ_TOM":
        plan = select_refinement_plan(shapes, training, switch)
        _, regs, _, _ = exact_fit_static(plan, shapes, training, switch, 1, cfg)
    else:
        raise HarnessError(f"{strategy} is not a dynamic strategy")
    if params.registers is not None:
        regs = params.registers
    return plan, regs


def fit_forecaster(training, chains, regs, params: StrategyParams) -> Predictor:
    if params.predictor is not None:
        return params.predictor
    model = ForecastModel()
    if params.fit_scaling and len(training) >= 3:
        clusters = fit_clusters(training, _ops(chains), seed=params.seed)
        clusters = fit_scaling(clusters, training, chains, regs, desp_predictor(),
                               params.load_cfg)
        model = ForecastModel(clusters=tuple(clusters))
    return model.predictor()


def _relative_error(pred: Mapping[OpRef, CostEntry], true: CostMatrix) -> dict[OpRef, float]:
    return {k: abs(e.B - true[k].B) / true[k].B for k, e in pred.items() if true[k].B > 0}


def run_dynamic(strategy: str, training: Sequence[CostMatrix], test: Sequence[CostMatrix],
                shapes: Sequence[QueryShape], switch: SwitchConfig,
                params: StrategyParams = StrategyParams()) -> SimulationRun:
    if strategy not in DYNAMIC:
        raise HarnessError(f"{strategy} is not a dynamic strategy")
    if not training:
        raise HarnessError("need at least one training window")
    cfg = params.load_cfg
    plan, regs = bootstrap_for(strategy, training, shapes, switch, params)
    chains = build_chains(plan, shapes)
    ops = _ops(chains)
    predict = fit_forecaster(training, chains, regs, params) if strategy == "DYNAMIQ_PRED" else None
    history = list(training)
    windows = []
    for cm in test:
        err = None
        if predict is None:
            costs = {op: cm[op] for op in ops}
        elif len(history) >= max(2, params.warmup) or params.predictor is not None:
            costs = dict(predict(history, ops).entries)
            err = _relative_error(costs, cm)
        else:
            # not enough history to forecast yet: plan for the typical window seen so far
            costs = median_costs(history, ops)
        mapping = _greedy(chains, regs, costs)
        windows.append(_window(cm.window, chains, regs, mapping, cm, cfg, err))
        history.append(cm)
    return SimulationRun(strategy, BootstrapPlan(plan, regs, tuple(chains)), tuple(windows),
                         _config(switch, params, len(training), warmup=params.warmup),
                         params.seed)


def best_mapping(chains, registers: RegisterConfig, true: CostMatrix, cfg: LoadConfig):
    """Exhaustive search for the assignment with the smallest true load."""
    inst = build_goa_instance(chains, registers, true.entries)
    check_guard(inst)
    entries = [true[ref] for ref in inst.refs]
    last = {ch[-1] for ch in inst.chains}

    def load_of(caps):
        total = Fraction(0)
        for ch in inst.chains:
            for o in ch:
                e = entries[o]
                if caps[o] < e.B:
                    total += operator_load(e, caps[o], cfg)
                    break
                if o in last:
                    total += e.n_out
        return total

    best, best_load = {}, None
    for alpha, caps in walk_feasible(inst, distinct=True):
        load = load_of(caps)
        if best_load is None or load < best_load:
            best, best_load = dict(alpha), load
    return {r: inst.refs[o] for r, o in best.items()}, best_load


def run_optimal(strategy: str, test: Sequence[CostMatrix], shapes: Sequence[QueryShape],
                switch: SwitchConfig, params: StrategyParams = StrategyParams()) -> SimulationRun:
    """Per window, exhaustive search over plans x register layouts x mappings.

    Layouts are Slice-n-Repeat, an exact fit to the window's true demand for
    each plan, and anything passed in ``params.register_pool``.
    """
    if strategy not in OPTIMAL:
        raise HarnessError(f"{strategy} is not an optimal strategy")
    cfg = params.load_cfg
    if strategy == "OPTIMAL_MAX_DP":
        plans = [finest_plan(shapes)]
    else:
        plans = candidate_plans(shapes, test, switch)
    pool = [snr_sizes(switch), *params.register_pool]
    if params.registers is not None:
        pool = [params.registers]
    windows = []
    first = None
    for cm in test:
        best = None
        for plan in plans:
            chains = build_chains(plan, shapes)
            fit, _ = exact_fit_registers(chains, {op: cm[op].B for op in _ops(chains)}, switch)
            layouts = pool if params.registers is not None else list(dict.fromkeys([*pool, fit]))
            for regs in layouts:
                try:
                    mapping, load = best_mapping(chains, regs, cm, cfg)
                except GuardError as exc:
                    raise HarnessError(f"{strategy} needs a micro instance: {exc}") from None
                if best is None or load < best[0]:
                    best = (load, plan, chains, regs, mapping)
        _, plan, chains, regs, mapping = best
        first = first or (plan, regs, chains)
        windows.append(_window(cm.window, chains, regs, mapping, cm, cfg))
    plan, regs, chains = first if first else (plans[0], pool[0], ())
    return SimulationRun(strategy, BootstrapPlan(plan, regs, tuple(chains)), tuple(windows),
                         _config(switch, params, 0), params.seed)


def simulate(strategy: str, history: Sequence[CostMatrix], shapes: Sequence[QueryShape],
             switch: SwitchConfig, train_windows: int,
             params: StrategyParams = StrategyParams()) -> SimulationRun:
    """Train on the first ``train_windows`` windows and evaluate the rest."""
    if strategy not in STRATEGIES:
        raise HarnessError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    if not 0 < train_windows < len(history) and strategy not in OPTIMAL:
        raise HarnessError(f"need 0 < train_windows < {len(history)}")
    training, test = history[:train_windows], history[train_windows:]
    if strategy in STATIC:
        return run_static(strategy, training, test, shapes, switch, params)
    if strategy in DYNAMIC:
        return run_dynamic(strategy, training, test, shapes, switch, params)
    return run_optimal(strategy, test, shapes, switch, params)


def frozen_plan_run(strategy: str, plan: BootstrapPlan, history: Sequence[CostMatrix],
                    shapes: Sequence[QueryShape], switch: SwitchConfig, train_windows: int,
                    params: StrategyParams = StrategyParams()) -> SimulationRun:
    """Evaluate a saved bootstrap plan: static greedy mapping on median
    training costs, or per-window remapping for dynamic strategies."""
    cfg = params.load_cfg
    training, test = history[:train_windows], history[train_windows:]
    chains = build_chains(plan.refinement, shapes)
    ops = _ops(chains)
    regs = plan.registers
    if strategy in STATIC:
        factor = params.overprovision if strategy == "SONATA_OP" else 1
        static = _greedy(chains, regs, median_costs(training, ops, factor))
    elif strategy == "DYNAMIQ_PRED":
        predict = fit_forecaster(training, chains, regs, params)
    windows, seen = [], list(training)
    for cm in test:
        err = None
        if strategy in STATIC:
            mapping = static
        elif strategy == "DYNAMIQ_PRED" and len(seen) >= max(2, params.warmup):
            pred = dict(predict(seen, ops).entries)
            err = _relative_error(pred, cm)
            mapping = _greedy(chains, regs, pred)
        elif strategy == "DYNAMIQ_PRED":
            mapping = _greedy(chains, regs, median_costs(seen, ops))
        else:
            mapping = _greedy(chains, regs, cm.entries)
        windows.append(_window(cm.window, chains, regs, mapping, cm, cfg, err))
        seen.append(cm)
    return SimulationRun(strategy, BootstrapPlan(plan.refinement, regs, tuple(chains)),
                         tuple(windows), _config(switch, params, train_windows), params.seed)


def strategy_table(runs: Sequence[SimulationRun]) -> list[tuple[str, float, float]]:
    """(strategy, median window load, total load) per run."""
    return [(r.strategy, r.median, float(r.total)) for r in runs]

