"""Next-window cost forecasts: double exponential smoothing plus per-cluster scaling."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np
from sklearn.cluster import KMeans

from .bootstrap import RegisterConfig
from .load import LoadConfig, assignment_load
from .mapping import build_goa_instance, greedy_map, to_opref_mapping
from .query import DependencyChain, OpRef
from .workload import CostEntry, CostMatrix

DEFAULT_ALPHA = 0.5
DEFAULT_BETA = 0.3
GAMMA_GRID = tuple(Fraction(n, 10) for n in range(10, 31))
MAX_PASSES = 5

# (history so far, operators wanted) -> predicted cost matrix for the next window
Predictor = Callable[[Sequence[CostMatrix], Sequence[OpRef]], CostMatrix]


class ForecastError(ValueError):
    pass


@dataclass(frozen=True)
class DespState:
    level: float
    trend: float
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (0 < self.alpha < 1 and 0 < self.beta < 1):
            raise ValueError("smoothing factors must lie in (0, 1)")

    @classmethod
    def start(cls, y1: float, y2: float, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> DespState:
        return cls(y1, y2 - y1, alpha, beta)

    def forecast(self, horizon: int = 1) -> float:
        return self.level + horizon * self.trend


def desp_update(state: DespState, y: float) -> DespState:
    a, b = state.alpha, state.beta
    level = a * y + (1 - a) * (state.level + state.trend)
    trend = b * (level - state.level) + (1 - b) * state.trend
    return replace(state, level=level, trend=trend)


def desp_forecast(series: Sequence[float], alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA,
                  horizon: int = 1) -> float:
    """Fit on the whole series and forecast ``horizon`` steps past its end."""
    if len(series) < 2:
        raise ForecastError("need at least two observations")
    st = DespState.start(series[0], series[1], alpha, beta)
    for y in series[1:]:
        st = desp_update(st, y)
    return st.forecast(horizon)


def predict_window(history: Sequence[CostMatrix], keys: Sequence[OpRef] | None = None,
                   horizon: int = 1, alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> CostMatrix:
    """Forecast every cost component independently, then repair the entry."""
    if len(history) < 2:
        raise ForecastError(f"need at least two history windows, got {len(history)}")
    keys = sorted(keys if keys is not None else history[-1].entries)
    entries = {}
    for key in keys:
        parts = []
        for attr in ("B", "n_in", "n_out"):
            f = desp_forecast([getattr(cm[key], attr) for cm in history], alpha, beta, horizon)
            parts.append(max(0, round(f)))
        b, n_in, n_out = parts
        entries[key] = CostEntry(b, n_in, min(n_out, n_in))
    return CostMatrix(history[-1].window + horizon, entries)


def desp_predictor(alpha=DEFAULT_ALPHA, beta=DEFAULT_BETA) -> Predictor:
    return lambda history, keys: predict_window(history, keys, 1, alpha, beta)


def oracle_predictor(future: Mapping[int, CostMatrix]) -> Predictor:
    """Looks up the true matrix of the window being predicted."""
    def predict(history, keys):
        w = history[-1].window + 1
        return CostMatrix(w, {k: future[w][k] for k in keys})
    return predict


# --- clustering --------------------------------------------------------------

@dataclass(frozen=True)
class OperatorCluster:
    cluster_id: int
    members: tuple[OpRef, ...]
    features: tuple[tuple[float, float, float], ...] = ()
    gamma: Fraction = Fraction(1)


def operator_features(history: Sequence[CostMatrix], op: OpRef) -> tuple[float, float, float]:
    n_in = [cm[op].n_in for cm in history]
    bits = np.array([cm[op].B for cm in history], dtype=float)
    mean = bits.mean()
    cov = float(bits.std() / mean) if mean else 0.0
    return (float(np.percentile(n_in, 95)), float(np.percentile(bits, 95)), cov)


def fit_clusters(history: Sequence[CostMatrix], ops: Sequence[OpRef] | None = None,
                 k: int = 10, seed: int = 0) -> list[OperatorCluster]:
    if len(history) < 2:
        raise ForecastError("need at least two training windows")
    ops = sorted(ops if ops is not None else history[0].entries)
    if not ops:
        return []
    feats = np.array([operator_features(history, op) for op in ops])
    spread = feats.std(axis=0)
    scaled = (feats - feats.mean(axis=0)) / np.where(spread > 0, spread, 1.0)
    k = min(k, len(ops), len(np.unique(scaled, axis=0)))
    labels = KMeans(n_clusters=k, n_init=10, max_iter=100, random_state=seed).fit_predict(scaled)
    # renumber by first member so ids do not depend on k-means internals
    order: dict[int, int] = {}
    for lab in labels:
        order.setdefault(int(lab), len(order))
    groups: dict[int, list[int]] = {}
    for n, lab in enumerate(labels):
        groups.setdefault(order[int(lab)], []).append(n)
    return [OperatorCluster(cid, tuple(ops[n] for n in idx),
                            tuple(tuple(float(x) for x in feats[n]) for n in idx))
            for cid, idx in sorted(groups.items())]


def gamma_map(clusters: Sequence[OperatorCluster]) -> dict[OpRef, Fraction]:
    return {op: c.gamma for c in clusters for op in c.members}


def scale_prediction(pred: CostMatrix, gammas: Mapping[OpRef, Fraction]) -> CostMatrix:
    """Scaled required memory; tuple counts are left alone."""
    out = {}
    for k, e in pred.entries.items():
        g = Fraction(gammas.get(k, 1))
        out[k] = CostEntry(round(e.B * g), e.n_in, e.n_out)
    return CostMatrix(pred.window, out)


# --- scaling fit -------------------------------------------------------------

def training_score(history: Sequence[CostMatrix], chains: Sequence[DependencyChain],
                   registers: RegisterConfig, gammas: Mapping[OpRef, Fraction],
                   predictor: Predictor | None = None, load_cfg: LoadConfig = LoadConfig(),
                   start: int = 2) -> float:
    """Sum of log2(1 + load) over the training windows replayed with scaled forecasts."""
    predictor = predictor or desp_predictor()
    ops = [op for ch in chains for op in ch.operators]
    score = 0.0
    for w in range(start, len(history)):
        pred = scale_prediction(predictor(history[:w], ops), gammas)
        inst = build_goa_instance(chains, registers, pred.entries)
        mapping = to_opref_mapping(greedy_map(inst), inst)
        load = assignment_load(mapping, chains, history[w].entries, registers, load_cfg).total
        score += math.log2(1 + float(load))
    return score


def fit_scaling(clusters: Sequence[OperatorCluster], history: Sequence[CostMatrix],
                chains: Sequence[DependencyChain], registers: RegisterConfig,
                predictor: Predictor | None = None, load_cfg: LoadConfig = LoadConfig(),
                grid: Sequence[Fraction] = GAMMA_GRID) -> list[OperatorCluster]:
    """Cyclic coordinate descent over one scaling factor per cluster.

    Clusters are visited by id; a grid value replaces the current one only
    when it strictly lowers the training score.  Stops after a pass with no
    change or after a fixed number of passes.
    """
    clusters = [replace(c, gamma=Fraction(1)) for c in clusters]
    if len(history) < 3:
        return clusters

    def score(cs):
        return training_score(history, chains, registers, gamma_map(cs), predictor, load_cfg)

    best = score(clusters)
    for _ in range(MAX_PASSES):
        changed = False
        for n in range(len(clusters)):
            for g in grid:
                if g == clusters[n].gamma:
                    continue
                trial = list(clusters)
                trial[n] = replace(trial[n], gamma=g)
                s = score(trial)
                if s < best:
                    best, clusters, changed = s, trial, True
        if not changed:
            break
    return clusters


# --- persistence -------------------------------------------------------------

@dataclass(frozen=True)
class ForecastModel:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    clusters: tuple[OperatorCluster, ...] = field(default_factory=tuple)

    def predictor(self) -> Predictor:
        base = desp_predictor(self.alpha, self.beta)
        gammas = gamma_map(self.clusters)
        return lambda history, keys: scale_prediction(base(history, keys), gammas)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta,
                "clusters": [{"id": c.cluster_id, "gamma": str(c.gamma),
                              "members": [list(m) for m in c.members]} for c in self.clusters]}

    @classmethod
    def from_json(cls, obj: Mapping) -> ForecastModel:
        cs = tuple(OperatorCluster(int(c["id"]), tuple(OpRef(*m) for m in c["members"]),
                                   gamma=Fraction(c["gamma"])) for c in obj["clusters"])
        return cls(float(obj["alpha"]), float(obj["beta"]), cs)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
