"""Cost-aware context selection.

Free sources (time and prior usage) are always combined. Costly sensors are
ranked once by greedy cost-effectiveness on a validation fold; at run time
they are read in ranking order until the posterior mass of the response set
meets the caller's accuracy target.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .discretize import CELL, GPS, MOVEMENT, PRIOR_SOURCES, TIME
from .estimate import CombinedEstimator, EstimatorSpec, ResponseSet, hits, map_estimate, top_mass
from .trace import ContextSnapshot, LabeledEvent, Vocabulary

FREE_SOURCES: tuple[str, ...] = (TIME, *PRIOR_SOURCES.values())
COSTLY_SOURCES: tuple[str, ...] = (MOVEMENT, CELL, GPS)
SENSOR_NAMES = {MOVEMENT: "accel", CELL: "cell", GPS: "gps"}

DEFAULT_COSTS_J = {MOVEMENT: 1.65, CELL: 1.2, GPS: 175.0}
SUBMODULARITY_TOL = 0.01


class SmartContextError(ValueError):
    pass


@dataclass(frozen=True)
class CostModel:
    """Expected energy per reading (joules) of each costly source."""

    costs: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_COSTS_J))
    free: frozenset[str] = frozenset(FREE_SOURCES)

    def __post_init__(self) -> None:
        for s, c in self.costs.items():
            if c < 0:
                raise SmartContextError(f"negative cost for {s}")

    @classmethod
    def default(cls, gps_cost: float = 175.0, **overrides: float) -> CostModel:
        costs = dict(DEFAULT_COSTS_J)
        costs[GPS] = gps_cost
        costs.update(overrides)
        return cls(costs)

    def is_free(self, source: str) -> bool:
        return source in self.free

    def cost(self, source: str) -> float:
        return 0.0 if source in self.free else float(self.costs[source])


# --------------------------------------------------------------------------
# ranking
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ContextRanking:
    order: tuple[str, ...]
    gains: tuple[float, ...]
    effectiveness: tuple[float, ...]
    base_utility: float = 0.0

    def __iter__(self):
        return iter(self.order)

    def __len__(self) -> int:
        return len(self.order)


def greedy_rank(utility: Callable[[frozenset[str]], float], free: Iterable[str],
                costly: Iterable[str], costs: Mapping[str, float]) -> ContextRanking:
    """Greedy ordering by marginal gain per unit cost.

    Ties go to the cheaper source, then to the lexicographically smaller name.
    """
    chosen = frozenset(free)
    left = list(costly)
    for s in left:
        if costs[s] <= 0:
            raise SmartContextError(f"costly source {s!r} has zero cost; mark it free instead")
    base = current = utility(chosen)
    order, gains, eff = [], [], []
    while left:
        scored = []
        for s in left:
            g = utility(chosen | {s}) - current
            scored.append((-(g / costs[s]), costs[s], s, g))
        scored.sort()
        neg_e, _, best, g = scored[0]
        order.append(best)
        gains.append(g)
        eff.append(-neg_e)
        chosen = chosen | {best}
        current += g
        left.remove(best)
    return ContextRanking(tuple(order), tuple(gains), tuple(eff), base)


def _free_and_costly(estimator: CombinedEstimator, cost_model: CostModel) -> tuple[list[str], list[str]]:
    free = [s for s in estimator.sources if cost_model.is_free(s)]
    costly = [s for s in estimator.sources if not cost_model.is_free(s)]
    return free, costly


def _accuracy_fn(estimator: CombinedEstimator, validation: Sequence[LabeledEvent], r: int):
    if not validation:
        raise SmartContextError("validation set is empty")
    snaps = [e.context for e in validation]
    y = estimator.outcomes(validation)
    cache: dict[frozenset[str], float] = {}

    def acc(sources: frozenset[str]) -> float:
        if sources not in cache:
            d = estimator.distributions(snaps, sorted(sources))
            cache[sources] = float(hits(d, y, r).mean())
        return cache[sources]

    return acc


def rank_sources(estimator: CombinedEstimator, validation: Sequence[LabeledEvent],
                 cost_model: CostModel | None = None, r: int = 1) -> ContextRanking:
    cost_model = cost_model or CostModel()
    free, costly = _free_and_costly(estimator, cost_model)
    costs = {s: cost_model.cost(s) for s in costly}
    return greedy_rank(_accuracy_fn(estimator, validation, r), free, costly, costs)


@dataclass(frozen=True)
class SubmodularityReport:
    """Mean accuracy gain of adding each costly source on top of free + j other costly sources."""

    sources: tuple[str, ...]
    gains: np.ndarray  # (source, level)
    tol: float = SUBMODULARITY_TOL

    @property
    def levels(self) -> list[str]:
        return ["free"] + [f"free+{j}" for j in range(1, self.gains.shape[1])]

    def row_ok(self, i: int) -> bool:
        row = self.gains[i]
        return bool(np.all(np.diff(row) <= self.tol))

    @property
    def passed(self) -> bool:
        return all(self.row_ok(i) for i in range(len(self.sources)))

    def rows(self) -> list[list]:
        return [[SENSOR_NAMES.get(s, s), *self.gains[i].tolist(), self.row_ok(i)]
                for i, s in enumerate(self.sources)]


def check_submodularity(estimator: CombinedEstimator, validation: Sequence[LabeledEvent], r: int = 1,
                        cost_model: CostModel | None = None,
                        tol: float = SUBMODULARITY_TOL) -> SubmodularityReport:
    cost_model = cost_model or CostModel()
    free, costly = _free_and_costly(estimator, cost_model)
    if len(costly) < 2:
        raise SmartContextError("need at least two costly sources")
    acc = _accuracy_fn(estimator, validation, r)
    base = frozenset(free)
    gains = np.zeros((len(costly), len(costly)))
    for i, x in enumerate(costly):
        others = [s for s in costly if s != x]
        for j in range(len(costly)):
            vals = [acc(base | set(c) | {x}) - acc(base | set(c))
                    for c in itertools.combinations(others, j)]
            gains[i, j] = float(np.mean(vals))
    return SubmodularityReport(tuple(costly), gains, tol)


# --------------------------------------------------------------------------
# policy
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SmartContextPolicy:
    estimator: CombinedEstimator
    ranking: ContextRanking
    cost_model: CostModel = field(default_factory=CostModel)
    r: int = 1

    def __post_init__(self) -> None:
        missing = set(self.ranking.order) - set(self.estimator.sources)
        if missing:
            raise SmartContextError(f"estimator lacks tables for ranked sources {sorted(missing)}")

    @property
    def free_sources(self) -> list[str]:
        return [s for s in self.estimator.sources if self.cost_model.is_free(s)]

    def prefix_sources(self, j: int) -> list[str]:
        return self.free_sources + list(self.ranking.order[:j])

    def prefix_energy(self) -> np.ndarray:
        """Cumulative joules after reading the first ``j`` ranked sources, ``j = 0..R``."""
        return np.concatenate([[0.0], np.cumsum([self.cost_model.cost(s) for s in self.ranking.order])])


@dataclass(frozen=True)
class EstimationResult:
    response: ResponseSet
    estimated_accuracy: float
    sources_used: tuple[str, ...]
    energy_spent: float
    target_met: bool


def estimate_event(policy: SmartContextPolicy, snapshot: ContextSnapshot,
                   target_accuracy: float) -> EstimationResult:
    """Read costly sources in ranking order until the response-set mass reaches the target."""
    est = policy.estimator
    used = list(policy.free_sources)
    dist = est.distribution(snapshot, used)
    mass = float(top_mass(dist, policy.r)[0])
    energy = 0.0
    for source in policy.ranking.order:
        if mass >= target_accuracy:
            break
        used.append(source)
        energy += policy.cost_model.cost(source)
        dist = est.distribution(snapshot, used)
        mass = float(top_mass(dist, policy.r)[0])
    return EstimationResult(map_estimate(dist, policy.r), mass, tuple(used), energy,
                            mass >= target_accuracy)


@dataclass(frozen=True)
class SweepRow:
    target: float
    acc_hit_rate: float
    target_met_frac: float
    access_freq: dict[str, float]
    mean_energy_j: float

    def as_csv(self) -> list:
        return [self.target, self.acc_hit_rate, self.target_met_frac,
                *(self.access_freq.get(s, 0.0) for s in COSTLY_SOURCES), self.mean_energy_j]


SWEEP_HEADER = ["target", "acc_hit_rate", "target_met_frac",
                *(f"freq_{SENSOR_NAMES[s]}" for s in COSTLY_SOURCES), "mean_energy_j"]


@dataclass
class PrefixEvaluation:
    """Per-event mass and hit for every prefix ``j = 0..R`` of the ranking."""

    mass: np.ndarray  # (R+1, n)
    hit: np.ndarray   # (R+1, n)
    energy: np.ndarray  # (R+1,)
    order: tuple[str, ...]

    def reads(self, target: float) -> np.ndarray:
        R = self.mass.shape[0] - 1
        ok = self.mass >= target
        first = np.where(ok.any(axis=0), ok.argmax(axis=0), R)
        return first

    def stats(self, target: float) -> SweepRow:
        j = self.reads(target)
        idx = np.arange(self.mass.shape[1])
        freq = {s: float((j > i).mean()) for i, s in enumerate(self.order)}
        return SweepRow(
            target=float(target),
            acc_hit_rate=float(self.hit[j, idx].mean()),
            target_met_frac=float((self.mass[j, idx] >= target).mean()),
            access_freq=freq,
            mean_energy_j=float(self.energy[j].mean()),
        )


def evaluate_prefixes(policy: SmartContextPolicy, test: Sequence[LabeledEvent],
                      order: Sequence[str] | None = None) -> PrefixEvaluation:
    order = tuple(policy.ranking.order if order is None else order)
    est = policy.estimator
    snaps = [e.context for e in test]
    y = est.outcomes(test)
    free = policy.free_sources
    mass, hit = [], []
    for j in range(len(order) + 1):
        d = est.distributions(snaps, free + list(order[:j]))
        mass.append(top_mass(d, policy.r))
        hit.append(hits(d, y, policy.r))
    energy = np.concatenate([[0.0], np.cumsum([policy.cost_model.cost(s) for s in order])])
    return PrefixEvaluation(np.array(mass), np.array(hit), energy, order)


def sweep_targets(policy: SmartContextPolicy, test: Sequence[LabeledEvent],
                  targets: Sequence[float]) -> list[SweepRow]:
    if list(targets) != sorted(targets):
        raise SmartContextError("targets must be sorted ascending")
    ev = evaluate_prefixes(policy, test)
    return [ev.stats(t) for t in targets]


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_HEADER)
        for row in rows:
            w.writerow(row.as_csv())


def read_sweep_csv(path: str | Path) -> list[SweepRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for d in rows:
        freq = {s: float(d[f"freq_{SENSOR_NAMES[s]}"]) for s in COSTLY_SOURCES}
        out.append(SweepRow(float(d["target"]), float(d["acc_hit_rate"]), float(d["target_met_frac"]),
                            freq, float(d["mean_energy_j"])))
    return out


def exhaustive_orderings(policy: SmartContextPolicy, test: Sequence[LabeledEvent],
                         targets: Sequence[float]) -> dict[tuple[str, ...], tuple[float, float]]:
    """Mean energy and hit rate over ``targets`` for every ordering of the costly sources."""
    out = {}
    for perm in itertools.permutations(policy.ranking.order):
        ev = evaluate_prefixes(policy, test, perm)
        rows = [ev.stats(t) for t in targets]
        out[perm] = (float(np.mean([r.mean_energy_j for r in rows])),
                     float(np.mean([r.acc_hit_rate for r in rows])))
    return out


def temporal_halves(events: Sequence[LabeledEvent]) -> tuple[list[LabeledEvent], list[LabeledEvent]]:
    """Split time-ordered events at the midpoint of their time span."""
    if not events:
        return [], []
    t0, t1 = events[0].outcome.timestamp, events[-1].outcome.timestamp
    mid = (t0 + t1) / 2
    first = [e for e in events if e.outcome.timestamp < mid]
    second = [e for e in events if e.outcome.timestamp >= mid]
    return first, second


def build_policy(train: Sequence[LabeledEvent], vocab: Vocabulary, spec: EstimatorSpec | None = None,
                 cost_model: CostModel | None = None, r: int = 1) -> SmartContextPolicy:
    """Rank on the first half of ``train`` (scored by a model fit on the second half), then refit on all of it."""
    spec = spec or EstimatorSpec()
    cost_model = cost_model or CostModel()
    validation, rest = temporal_halves(train)
    if not validation or not rest:
        raise SmartContextError("training data too short to hold out a validation fold")
    ranker = spec.fit(rest, vocab)
    ranking = rank_sources(ranker, validation, cost_model, r)
    return SmartContextPolicy(spec.fit(train, vocab), ranking, cost_model, r)


def calibration_gap(policy: SmartContextPolicy, test: Sequence[LabeledEvent]) -> float:
    """Mean response-set mass minus observed hit rate with all sources (positive = overconfident)."""
    ev = evaluate_prefixes(policy, test)
    return float(ev.mass[-1].mean() - ev.hit[-1].mean())
