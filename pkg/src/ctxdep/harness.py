"""Evaluation protocols and the sample-application baselines."""

from __future__ import annotations

import csv
import logging
import os
import warnings
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np

from .discretize import raw_value
from .estimate import DEFAULT_SOURCES, EstimatorSpec, SourceSpec, hits
from .smartcontext import temporal_halves
from .trace import DEFAULT_VOCAB_CAP, LabeledEvent, Trace, UsageKind, Vocabulary, build_vocabulary

log = logging.getLogger(__name__)

MIN_SAMPLES_PER_BIN = 10
KDE_BANDWIDTH = 0.05
KDE_STEP = 0.005
DURATION_FRACTIONS = (1 / 12, 3 / 12, 6 / 12, 1.0)


class ProtocolError(ValueError):
    pass


def prepare(events: Sequence[LabeledEvent], kind: UsageKind | str,
            cap: int = DEFAULT_VOCAB_CAP) -> tuple[Vocabulary, list[LabeledEvent], float]:
    """Vocabulary for ``kind``, the in-vocabulary events, and the dropped fraction."""
    kind = UsageKind(kind)
    vocab = build_vocabulary(events, kind, cap)
    kept, dropped = vocab.filter(events)
    return vocab, kept, dropped


# --------------------------------------------------------------------------
# cross-validation protocols
# --------------------------------------------------------------------------

def loocv_accuracy(events: Sequence[LabeledEvent], vocab: Vocabulary, spec: EstimatorSpec | None = None,
                   r: int = 1, method: str = "vectorized") -> float:
    """Leave-one-out hit rate; binnings are fit once on all of ``events``.

    ``method="decrement"`` removes each event from the count tables, estimates
    and restores it; ``"vectorized"`` evaluates the same arithmetic for all
    events at once.
    """
    if len(events) < 2:
        raise ProtocolError("LOOCV needs at least two events")
    spec = spec or EstimatorSpec()
    est = spec.fit(events, vocab)
    y = est.outcomes(events)
    if method == "vectorized":
        return float(hits(est.loo_distributions(events), y, r).mean())
    if method != "decrement":
        raise ValueError(f"unknown LOOCV method {method!r}")
    n_hit = 0
    for ev, g in zip(events, y):
        with est.held_out(ev):
            n_hit += g in est.estimate(ev.context, r)
    return n_hit / len(events)


def two_fold_accuracies(events: Sequence[LabeledEvent], vocab: Vocabulary, spec: EstimatorSpec | None = None,
                        rs: Sequence[int] = (1,), supervised: bool | None = None) -> dict[int, float]:
    """Two-fold accuracy for several response-set sizes from one pair of fits."""
    spec = spec or EstimatorSpec()
    if supervised is not None and supervised != spec.supervised:
        spec = replace(spec, supervised=supervised)
    a, b = temporal_halves(events)
    if not a or not b:
        raise ProtocolError("a fold is empty")
    accs: dict[int, list[float]] = {r: [] for r in rs}
    for train, test in ((a, b), (b, a)):
        est = spec.fit(train, vocab)
        d = est.distributions([e.context for e in test])
        y = est.outcomes(test)
        for r in rs:
            accs[r].append(float(hits(d, y, r).mean()))
    return {r: float(np.mean(v)) for r, v in accs.items()}


def two_fold_eval(events: Sequence[LabeledEvent], vocab: Vocabulary, spec: EstimatorSpec | None = None,
                  r: int = 1, supervised: bool | None = None) -> float:
    """Train on one temporal half (binning included), test on the other, swap, average."""
    return two_fold_accuracies(events, vocab, spec, (r,), supervised)[r]


def contiguous_windows(events: Sequence[LabeledEvent], fraction: float) -> list[list[LabeledEvent]]:
    """Split into ``round(1/fraction)`` contiguous windows of (near) equal event count."""
    n_windows = max(1, round(1 / fraction))
    idx = np.array_split(np.arange(len(events)), n_windows)
    return [[events[i] for i in w] for w in idx]


def duration_split_eval(events: Sequence[LabeledEvent], vocab: Vocabulary,
                        spec: EstimatorSpec | None = None,
                        fractions: Sequence[float] = DURATION_FRACTIONS, r: int = 1) -> dict[float, float]:
    """Mean LOOCV accuracy over the contiguous windows of each trace fraction.

    Windows with fewer than two events are skipped; a fraction with no usable
    window maps to NaN.
    """
    out = {}
    for f in fractions:
        accs = []
        for w in contiguous_windows(events, f):
            if len(w) < 2:
                warnings.warn(f"skipping window of {len(w)} event(s) at fraction {f:.4g}", stacklevel=2)
                continue
            accs.append(loocv_accuracy(w, vocab, spec, r))
        out[f] = float(np.mean(accs)) if accs else float("nan")
    return out


# --------------------------------------------------------------------------
# bins sweep
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepPoint:
    bins: int
    effective_bins: int
    accuracy: float
    samples_per_bin: float
    flagged: bool


def bins_sweep(events: Sequence[LabeledEvent], vocab: Vocabulary, source: str, bin_counts: Sequence[int],
               r: int = 1, discretizer: str | None = None, rule: str = "bayes",
               seed: int = 0) -> list[SweepPoint]:
    """LOOCV accuracy of a single source against its bin count.

    Counts exceeding the number of distinct readings are skipped. Points with
    at most ten samples per bin on average are flagged.
    """
    if 1 not in bin_counts:
        raise ProtocolError("bin_counts must include 1 (the no-context baseline)")
    disc = discretizer or DEFAULT_SOURCES[source].discretizer
    distinct = len({raw_value(e.context, source) for e in events} - {None})
    points = []
    for n in bin_counts:
        if n > 1 and n > distinct + (disc == "categorical_topn"):
            log.info("skipping %d bins for %s: only %d distinct readings", n, source, distinct)
            continue
        spec = EstimatorSpec({source: SourceSpec(disc, n)}, rule=rule, seed=seed)
        if n == 1:
            spec = EstimatorSpec({source: SourceSpec("categorical_topn", 1)}, rule=rule, seed=seed)
        est_bins = spec.fit_binnings(events, vocab)[source].n_bins
        acc = loocv_accuracy(events, vocab, spec, r)
        per_bin = len(events) / est_bins
        points.append(SweepPoint(n, est_bins, acc, per_bin, per_bin <= MIN_SAMPLES_PER_BIN))
    return points


def prior_only_loocv(events: Sequence[LabeledEvent], vocab: Vocabulary, r: int = 1) -> float:
    """LOOCV hit rate of always answering the top-``r`` training labels."""
    spec = EstimatorSpec({})
    return loocv_accuracy(events, vocab, spec, r)


# --------------------------------------------------------------------------
# user diversity
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class KdeCurve:
    grid: np.ndarray
    density: np.ndarray
    bandwidth: float

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def per_user_kde(values: Sequence[float], bandwidth: float = KDE_BANDWIDTH,
                 step: float = KDE_STEP) -> KdeCurve:
    """Gaussian-kernel density of per-user accuracies on ``[0, 1]``."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ProtocolError("need at least one value")
    grid = np.linspace(0.0, 1.0, int(round(1 / step)) + 1)
    z = (grid[:, None] - x[None, :]) / bandwidth
    dens = np.exp(-0.5 * z**2).mean(axis=1) / (bandwidth * np.sqrt(2 * np.pi))
    return KdeCurve(grid, dens, bandwidth)


# --------------------------------------------------------------------------
# sample applications
# --------------------------------------------------------------------------

APPS: dict[str, tuple[UsageKind, int]] = {
    "bookmarks": (UsageKind.WEB, 10),
    "phone_favorites": (UsageKind.PHONE, 10),
    "redial": (UsageKind.PHONE, 1),
    "quicklaunch": (UsageKind.APP, 4),
    "preload": (UsageKind.APP, 10),
}

APP_LAUNCH_SECONDS = {"cold": 2.0, "preloaded": 0.6}


def recency_hits(labels: Sequence[str], r: int) -> np.ndarray:
    """Whether each label is among the ``r`` most recent distinct earlier labels."""
    recent: list[str] = []
    out = np.zeros(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        out[i] = lab in recent[:r]
        if lab in recent:
            recent.remove(lab)
        recent.insert(0, lab)
        del recent[r:]
    return out


def mru_hits(labels: Sequence[str], capacity: int) -> np.ndarray:
    """Hits of a move-to-front cache holding ``capacity`` entries."""
    cache: list[str] = []
    out = np.zeros(len(labels), dtype=bool)
    for i, lab in enumerate(labels):
        if lab in cache:
            out[i] = True
            cache.remove(lab)
        cache.insert(0, lab)
        if len(cache) > capacity:
            cache.pop()
    return out


def static_top_hits(labels: Sequence[str], r: int) -> np.ndarray:
    """Hits of the ideal static list: the ``r`` most frequent labels over the whole sequence."""
    ranked = sorted(Counter(labels).items(), key=lambda kv: (-kv[1], kv[0]))
    top = {lab for lab, _ in ranked[:r]}
    return np.array([lab in top for lab in labels], dtype=bool)


def _baselines(labels: Sequence[str], scored: np.ndarray, r: int) -> dict[str, float]:
    in_vocab = [lab for lab, s in zip(labels, scored) if s]
    # history lists do not exist before the first event, so it is not scored
    warm = scored.copy()
    warm[0] = False
    if not warm.any():
        warm = scored
    return {
        "static_topN": 1.0 - float(static_top_hits(in_vocab, r).mean()),
        "recency": 1.0 - float(recency_hits(labels, r)[warm].mean()),
        "mru": 1.0 - float(mru_hits(labels, r)[warm].mean()),
    }


def sample_app_eval(events: Sequence[LabeledEvent], vocab: Vocabulary, app: str, r: int | None = None,
                    spec: EstimatorSpec | None = None) -> dict[str, float]:
    """Miss rates of a context-aware list against static, recency and MRU lists.

    ``events`` are all events of the app's usage kind in time order,
    out-of-vocabulary ones included: they feed the recency history but are
    not scored.
    """
    kind, default_r = APPS[app]
    r = default_r if r is None else r
    return sample_apps_eval(events, vocab, {app: r}, spec)[app]


def sample_apps_eval(events: Sequence[LabeledEvent], vocab: Vocabulary, apps: Mapping[str, int],
                     spec: EstimatorSpec | None = None) -> dict[str, dict[str, float]]:
    """:func:`sample_app_eval` for several apps of one usage kind, sharing the two-fold fits.

    ``apps`` maps each application name to its list size.
    """
    kinds = {APPS[a][0] for a in apps}
    if len(kinds) != 1:
        raise ProtocolError("apps must share one usage kind")
    kind = kinds.pop()
    evs = [e for e in events if e.outcome.kind == kind]
    labels = [e.outcome.label for e in evs]
    scored = np.array([lab in vocab for lab in labels], dtype=bool)
    kept = [e for e, s in zip(evs, scored) if s]
    spec = spec or EstimatorSpec(supervised=True)
    sizes = sorted({min(r, vocab.k) for r in apps.values()})
    context = two_fold_accuracies(kept, vocab, spec, sizes)
    return {app: {"context_aware": 1.0 - context[min(r, vocab.k)], **_baselines(labels, scored, r)}
            for app, r in apps.items()}


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

@dataclass
class EvalReport:
    protocol: str
    kind: str
    r: int
    per_user: dict[str, float] = field(default_factory=dict)
    dropped: dict[str, float] = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(list(self.per_user.values()))) if self.per_user else float("nan")

    def rows(self) -> list[list[Any]]:
        return [[u, self.per_user[u], self.dropped.get(u, 0.0)] for u in sorted(self.per_user)]

    def to_csv(self, path: str | Path) -> None:
        write_csv(path, ["user", "accuracy", "dropped_frac"], self.rows())

    @classmethod
    def from_csv(cls, path: str | Path, protocol: str, kind: str, r: int) -> EvalReport:
        rep = cls(protocol, kind, r)
        for row in read_csv(path):
            rep.per_user[row["user"]] = float(row["accuracy"])
            rep.dropped[row["user"]] = float(row["dropped_frac"])
        return rep


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)


def map_users(fn: Callable, items: Sequence, jobs: int = 1) -> list:
    """``fn`` over ``items`` in order, optionally across processes."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class _UserTask:
    protocol: str
    events: list[LabeledEvent]
    kind: UsageKind
    spec: EstimatorSpec
    r: int
    cap: int

    def __call__(self) -> tuple[float, float]:
        vocab, kept, dropped = prepare(self.events, self.kind, self.cap)
        r = min(self.r, vocab.k)
        if self.protocol == "loocv":
            return loocv_accuracy(kept, vocab, self.spec, r), dropped
        if self.protocol == "twofold":
            return two_fold_eval(kept, vocab, self.spec, r), dropped
        raise ProtocolError(f"unknown protocol {self.protocol!r}")


def _run(task: _UserTask) -> tuple[float, float]:
    return task()


def evaluate_trace(trace: Trace, kind: UsageKind | str, spec: EstimatorSpec | None = None, r: int = 1,
                   protocol: str = "loocv", cap: int = DEFAULT_VOCAB_CAP, jobs: int = 1) -> EvalReport:
    """Per-user accuracy under ``protocol`` (``loocv`` or ``twofold``), merged in user-id order."""
    kind = UsageKind(kind)
    spec = spec or EstimatorSpec()
    users = [u for u in trace.user_ids() if len(trace.events(u, kind)) >= 2]
    tasks = [_UserTask(protocol, trace.events(u, kind), kind, spec, r, cap) for u in users]
    results = map_users(_run, tasks, jobs)
    rep = EvalReport(protocol, kind.value, r)
    for u, (acc, dropped) in zip(users, results):
        rep.per_user[u] = acc
        rep.dropped[u] = dropped
    return rep
