"""Laplace-corrected posterior tables, MAP response sets and classifier combination."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from .discretize import (
    CELL,
    GPS,
    MOVEMENT,
    PRIOR_SOURCES,
    SOURCES,
    TIME,
    Binning,
    BinningError,
    categorical_topn_bins,
    distinct_count,
    fit_binning,
    lloyd,
    raw_value,
)
from .trace import ContextSnapshot, LabeledEvent, UsageKind, Vocabulary

RULES = ("bayes", "max", "mean")
DEFAULT_MIN_SAMPLES = 10


class EstimationError(ValueError):
    pass


# --------------------------------------------------------------------------
# posterior tables
# --------------------------------------------------------------------------

def _outcomes(events: Sequence[LabeledEvent], vocab: Vocabulary) -> np.ndarray:
    try:
        return np.fromiter((vocab.index(e.outcome.label) for e in events), dtype=np.int64,
                           count=len(events))
    except KeyError as exc:
        raise EstimationError(f"outcome {exc.args[0]!r} is not in the vocabulary") from None


def laplace_rows(rows: np.ndarray, row_totals: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """``(count(g|x) + k P(g)) / (count(x) + k)`` row-wise, with ``k`` outcomes.

    Empty rows return the priors exactly rather than up to rounding.
    """
    k = rows.shape[-1]
    totals = np.asarray(row_totals)[..., None]
    out = (rows + k * priors) / (totals + k)
    return np.where(totals > 0, out, np.broadcast_to(priors, out.shape))


def raw_rows(rows: np.ndarray, row_totals: np.ndarray, priors: np.ndarray) -> np.ndarray:
    """Unsmoothed conditional frequency; empty rows fall back to the priors."""
    totals = np.asarray(row_totals, dtype=float)[..., None]
    with np.errstate(invalid="ignore", divide="ignore"):
        out = rows / totals
    return np.where(totals > 0, out, np.broadcast_to(priors, out.shape))


@dataclass
class PosteriorTable:
    """Outcome counts per bin of one context source.

    Counts are integers so that removing and re-adding an event restores the
    table exactly.
    """

    source: str
    binning: Binning
    counts: np.ndarray
    class_counts: np.ndarray

    @property
    def k(self) -> int:
        return self.counts.shape[1]

    @property
    def bin_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def total(self) -> int:
        return int(self.class_counts.sum())

    @property
    def priors(self) -> np.ndarray:
        return self.class_counts / self.total

    def posterior(self, b: int, laplace: bool = True) -> np.ndarray:
        row = self.counts[b]
        f = laplace_rows if laplace else raw_rows
        return f(row, row.sum(), self.priors)

    def posteriors(self, bins: np.ndarray, laplace: bool = True) -> np.ndarray:
        rows = self.counts[bins]
        f = laplace_rows if laplace else raw_rows
        return f(rows, rows.sum(axis=1), self.priors)

    def remove(self, b: int, outcome: int) -> None:
        self.counts[b, outcome] -= 1
        self.class_counts[outcome] -= 1

    def add(self, b: int, outcome: int) -> None:
        self.counts[b, outcome] += 1
        self.class_counts[outcome] += 1

    def to_dict(self) -> dict:
        return {"source": self.source, "binning": self.binning.to_dict(),
                "counts": self.counts.tolist(), "class_counts": self.class_counts.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> PosteriorTable:
        return cls(d["source"], Binning.from_dict(d["binning"]),
                   np.asarray(d["counts"], dtype=np.int64),
                   np.asarray(d["class_counts"], dtype=np.int64))


def build_table(events: Sequence[LabeledEvent], binning: Binning, vocab: Vocabulary) -> PosteriorTable:
    if not events:
        raise EstimationError("cannot build a posterior table from an empty training set")
    y = _outcomes(events, vocab)
    b = binning.assign_snapshots([e.context for e in events])
    counts = np.zeros((binning.n_bins, vocab.k), dtype=np.int64)
    np.add.at(counts, (b, y), 1)
    return PosteriorTable(binning.source, binning, counts, np.bincount(y, minlength=vocab.k))


def laplace_posterior(table: PosteriorTable, b: int) -> np.ndarray:
    return table.posterior(b)


# --------------------------------------------------------------------------
# MAP response sets
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ResponseSet:
    outcomes: tuple[int, ...]
    mass: float

    def __contains__(self, outcome: object) -> bool:
        return outcome in self.outcomes

    def __len__(self) -> int:
        return len(self.outcomes)


def map_estimate(dist: np.ndarray, r: int = 1) -> ResponseSet:
    """Top-``r`` outcomes by posterior; lower outcome id wins ties."""
    dist = np.asarray(dist, dtype=float)
    if not 1 <= r <= len(dist):
        raise EstimationError(f"r={r} outside [1, {len(dist)}]")
    top = np.argsort(-dist, kind="stable")[:r]
    return ResponseSet(tuple(int(i) for i in top), float(dist[top].sum()))


def hits(dists: np.ndarray, outcomes: np.ndarray, r: int) -> np.ndarray:
    """Whether each row's true outcome falls in its top-``r`` response set.

    Same tie-breaking as :func:`map_estimate`: an outcome ranks below every
    outcome with higher probability and every lower-id outcome with equal
    probability.
    """
    dists = np.asarray(dists)
    n, k = dists.shape
    py = dists[np.arange(n), outcomes][:, None]
    above = (dists > py).sum(axis=1)
    tied_before = ((dists == py) & (np.arange(k)[None, :] < outcomes[:, None])).sum(axis=1)
    return (above + tied_before) < r


def top_mass(dists: np.ndarray, r: int) -> np.ndarray:
    """Posterior mass of the top-``r`` response set per row.

    Summed largest first, the same order :func:`map_estimate` uses, so both
    agree to the last bit.
    """
    dists = np.atleast_2d(dists)
    return np.sort(dists, axis=1)[:, ::-1][:, :r].sum(axis=1)


# --------------------------------------------------------------------------
# combination rules
# --------------------------------------------------------------------------

def combine_many(dists: Sequence[np.ndarray], priors: np.ndarray, rule: str = "bayes") -> np.ndarray:
    """Combine per-source posteriors, each of shape ``(n, k)`` (or ``(k,)``).

    ``bayes`` multiplies the likelihood ratios ``P(g|x_s)/P(g)`` onto the prior
    in log space; ``max`` normalizes the element-wise maximum; ``mean``
    averages.
    """
    if rule not in RULES:
        raise EstimationError(f"unknown combination rule {rule!r}")
    priors = np.asarray(priors, dtype=float)
    if not len(dists):
        return np.broadcast_to(priors, priors.shape).copy()
    if rule == "mean":
        acc = np.array(dists[0], dtype=float)
        for d in dists[1:]:
            acc = acc + d
        return acc / len(dists)
    if rule == "max":
        acc = np.array(dists[0], dtype=float)
        for d in dists[1:]:
            acc = np.maximum(acc, d)
        return acc / acc.sum(axis=-1, keepdims=True)
    live = priors > 0
    with np.errstate(divide="ignore"):
        lp = np.log(priors)
    acc = np.broadcast_to(lp, np.shape(dists[0])).copy()
    for d in dists:
        d = np.asarray(d, dtype=float)
        if np.any((d == 0) & live):
            raise EstimationError("zero posterior for an outcome with nonzero prior")
        with np.errstate(divide="ignore", invalid="ignore"):
            acc = acc + np.where(live, np.log(d) - lp, 0.0)
    acc = np.where(live, acc, -np.inf)
    acc = acc - acc.max(axis=-1, keepdims=True)
    out = np.exp(acc)
    return out / out.sum(axis=-1, keepdims=True)


def combine(dists: Sequence[np.ndarray], priors: np.ndarray, rule: str = "bayes") -> np.ndarray:
    """Combine single-event distributions of one shared outcome space."""
    if not len(dists):
        raise EstimationError("need at least one distribution")
    ks = {len(d) for d in dists}
    if len(ks) != 1 or len(priors) not in ks:
        raise EstimationError("distributions disagree on the number of outcomes")
    return combine_many([np.asarray(d, dtype=float) for d in dists], priors, rule)


# --------------------------------------------------------------------------
# prior-usage depth tables
# --------------------------------------------------------------------------

@dataclass
class DepthTable:
    """Outcome counts keyed by the binned ``depth``-tuple of prior labels."""

    kind: UsageKind
    depth: int
    binning: Binning
    counts: dict[tuple[int, ...], np.ndarray]
    class_counts: np.ndarray
    min_samples: int = DEFAULT_MIN_SAMPLES

    @property
    def priors(self) -> np.ndarray:
        return self.class_counts / self.class_counts.sum()

    def key(self, snapshot: ContextSnapshot) -> tuple[int, ...] | None:
        chain = snapshot.prior(self.kind)
        if len(chain) < self.depth:
            return None
        return tuple(self.binning.assign(lab) for lab in chain[: self.depth])

    def support(self, key: tuple[int, ...] | None) -> int:
        if key is None or key not in self.counts:
            return 0
        return int(self.counts[key].sum())

    def posterior(self, key: tuple[int, ...] | None) -> np.ndarray:
        k = len(self.class_counts)
        row = self.counts.get(key) if key is not None else None
        if row is None:
            row = np.zeros(k, dtype=np.int64)
        return laplace_rows(row, row.sum(), self.priors)


def build_depth_tables(train: Sequence[LabeledEvent], kind: UsageKind, max_depth: int,
                       prior_binning: Binning, vocab: Vocabulary,
                       min_samples: int = DEFAULT_MIN_SAMPLES) -> list[DepthTable]:
    """One table per depth ``1..max_depth``; events with shorter chains are skipped at that depth."""
    if max_depth < 1:
        raise EstimationError("max_depth must be >= 1")
    kind = UsageKind(kind)
    y = _outcomes(train, vocab)
    class_counts = np.bincount(y, minlength=vocab.k)
    tables = []
    for d in range(1, max_depth + 1):
        t = DepthTable(kind, d, prior_binning, {}, class_counts, min_samples)
        for ev, g in zip(train, y):
            key = t.key(ev.context)
            if key is None:
                continue
            row = t.counts.get(key)
            if row is None:
                row = t.counts[key] = np.zeros(vocab.k, dtype=np.int64)
            row[g] += 1
        tables.append(t)
    return tables


def select_depth(tables: Sequence[DepthTable], snapshot: ContextSnapshot,
                 min_samples: float | None = None) -> int:
    """Deepest depth whose observed tuple has more than ``min_samples`` training samples (else 1)."""
    for t in sorted(tables, key=lambda t: -t.depth):
        m = t.min_samples if min_samples is None else min_samples
        if t.depth > 1 and t.support(t.key(snapshot)) > m:
            return t.depth
    return 1


def auto_depth_posterior(tables: Sequence[DepthTable], snapshot: ContextSnapshot,
                         min_samples: float | None = None) -> np.ndarray:
    d = select_depth(tables, snapshot, min_samples)
    t = next(t for t in tables if t.depth == d)
    return t.posterior(t.key(snapshot))


# --------------------------------------------------------------------------
# combined estimator
# --------------------------------------------------------------------------

@dataclass
class CombinedEstimator:
    """Per-source posterior tables over one vocabulary plus a combination rule.

    ``depth_tables`` optionally replaces the depth-1 lookup of a prior-usage
    source by auto-depth selection over deeper prior tuples.
    """

    vocab: Vocabulary
    tables: dict[str, PosteriorTable]
    class_counts: np.ndarray
    rule: str = "bayes"
    laplace: bool = True
    depth_tables: dict[str, list[DepthTable]] = field(default_factory=dict)
    min_samples: float = DEFAULT_MIN_SAMPLES

    def __post_init__(self) -> None:
        if self.rule not in RULES:
            raise EstimationError(f"unknown combination rule {self.rule!r}")
        for t in self.tables.values():
            if t.k != self.vocab.k:
                raise EstimationError("tables disagree on the vocabulary size")
        # canonical source order keeps float sums independent of caller order
        order = {s: i for i, s in enumerate(SOURCES)}
        self.tables = dict(sorted(self.tables.items(), key=lambda kv: order.get(kv[0], len(order))))

    @property
    def sources(self) -> list[str]:
        return list(self.tables)

    @property
    def priors(self) -> np.ndarray:
        return self.class_counts / self.class_counts.sum()

    def _use(self, sources: Sequence[str] | None) -> list[str]:
        if sources is None:
            return self.sources
        wanted = set(sources)
        missing = wanted - set(self.tables)
        if missing:
            raise EstimationError(f"no table for sources {sorted(missing)}")
        return [s for s in self.tables if s in wanted]

    def source_posteriors(self, snapshots: Sequence[ContextSnapshot],
                          sources: Sequence[str] | None = None) -> dict[str, np.ndarray]:
        out = {}
        for s in self._use(sources):
            if s in self.depth_tables:
                out[s] = np.array([auto_depth_posterior(self.depth_tables[s], snap, self.min_samples)
                                   for snap in snapshots]).reshape(len(snapshots), self.vocab.k)
            else:
                t = self.tables[s]
                out[s] = t.posteriors(t.binning.assign_snapshots(snapshots), self.laplace)
        return out

    def distributions(self, snapshots: Sequence[ContextSnapshot],
                      sources: Sequence[str] | None = None) -> np.ndarray:
        per = self.source_posteriors(snapshots, sources)
        if not per:
            return np.tile(self.priors, (len(snapshots), 1))
        return combine_many(list(per.values()), self.priors, self.rule)

    def distribution(self, snapshot: ContextSnapshot, sources: Sequence[str] | None = None) -> np.ndarray:
        return self.distributions([snapshot], sources)[0]

    def estimate(self, snapshot: ContextSnapshot, r: int = 1,
                 sources: Sequence[str] | None = None) -> ResponseSet:
        return map_estimate(self.distribution(snapshot, sources), r)

    def outcomes(self, events: Sequence[LabeledEvent]) -> np.ndarray:
        return _outcomes(events, self.vocab)

    def accuracy(self, events: Sequence[LabeledEvent], r: int = 1,
                 sources: Sequence[str] | None = None) -> float:
        if not events:
            raise EstimationError("accuracy needs a non-empty test set")
        d = self.distributions([e.context for e in events], sources)
        return float(hits(d, self.outcomes(events), r).mean())

    # -- leave-one-out ----------------------------------------------------
    @contextlib.contextmanager
    def held_out(self, event: LabeledEvent) -> Iterator[CombinedEstimator]:
        """Temporarily remove ``event`` from every table."""
        g = self.vocab.index(event.outcome.label)
        bins = {s: t.binning.assign(raw_value(event.context, s)) for s, t in self.tables.items()}
        for s, t in self.tables.items():
            t.remove(bins[s], g)
        self.class_counts[g] -= 1
        try:
            yield self
        finally:
            for s, t in self.tables.items():
                t.add(bins[s], g)
            self.class_counts[g] += 1

    def loo_distributions(self, events: Sequence[LabeledEvent]) -> np.ndarray:
        """Combined distributions with each (training) event left out of its own estimate.

        Vectorized form of :meth:`held_out`; evaluates the same arithmetic.
        """
        if self.depth_tables:
            raise EstimationError("leave-one-out is not supported with auto-depth tables")
        y = self.outcomes(events)
        n, k = len(events), self.vocab.k
        onehot = np.zeros((n, k), dtype=np.int64)
        onehot[np.arange(n), y] = 1
        cc = self.class_counts[None, :] - onehot
        priors = cc / cc.sum(axis=1, keepdims=True)
        snaps = [e.context for e in events]
        per = []
        f = laplace_rows if self.laplace else raw_rows
        for t in self.tables.values():
            rows = t.counts[t.binning.assign_snapshots(snaps)] - onehot
            per.append(f(rows, rows.sum(axis=1), priors))
        if not per:
            return priors
        return combine_many(per, priors, self.rule)

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": self.vocab.kind.value,
            "vocabulary": list(self.vocab.labels),
            "rule": self.rule,
            "laplace": self.laplace,
            "class_counts": self.class_counts.tolist(),
            "tables": [t.to_dict() for t in self.tables.values()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> CombinedEstimator:
        vocab = Vocabulary(UsageKind(d["kind"]), tuple(d["vocabulary"]))
        tables = {t["source"]: PosteriorTable.from_dict(t) for t in d["tables"]}
        return cls(vocab, tables, np.asarray(d["class_counts"], dtype=np.int64),
                   rule=d["rule"], laplace=d.get("laplace", True))


def estimate(estimator: CombinedEstimator, snapshot: ContextSnapshot, r: int = 1) -> ResponseSet:
    return estimator.estimate(snapshot, r)


def accuracy(estimator: CombinedEstimator, test: Sequence[LabeledEvent], r: int = 1) -> float:
    return estimator.accuracy(test, r)


# --------------------------------------------------------------------------
# supervised binning
# --------------------------------------------------------------------------

def supervised_bins(fine: Binning, train: Sequence[LabeledEvent], vocab: Vocabulary, n: int,
                    seed: int = 0) -> Binning:
    """Group the bins of ``fine`` into ``n`` groups of similar usage.

    Each fine bin is represented by its Laplace-corrected outcome vector on
    ``train``; the vectors are clustered with k-means under the Euclidean
    norm. Groups are numbered in order of their lowest fine bin.
    """
    if fine.n_bins < n:
        raise BinningError(f"{fine.n_bins} fine bins cannot form {n} groups")
    table = build_table(train, fine, vocab)
    vectors = table.posteriors(np.arange(fine.n_bins))
    c = min(n, len(np.unique(vectors, axis=0)))
    _, labels = lloyd(vectors, c, seed)
    relabel: dict[int, int] = {}
    for lab in labels.tolist():
        relabel.setdefault(lab, len(relabel))
    groups = tuple(relabel[lab] for lab in labels.tolist())
    return Binning(fine.source, "supervised", len(relabel), fine=fine, groups=groups,
                   missing_bin=groups[fine.missing_bin])


# --------------------------------------------------------------------------
# estimator configuration
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SourceSpec:
    discretizer: str
    n_bins: int


CONTINUOUS = {TIME, MOVEMENT, GPS}

DEFAULT_SOURCES: dict[str, SourceSpec] = {
    TIME: SourceSpec("equal_freq", 20),
    MOVEMENT: SourceSpec("equal_freq", 20),
    GPS: SourceSpec("kmeans", 20),
    CELL: SourceSpec("categorical_topn", 10),
    **{s: SourceSpec("categorical_topn", 10) for s in PRIOR_SOURCES.values()},
}


@dataclass(frozen=True)
class EstimatorSpec:
    """How to turn training events into a :class:`CombinedEstimator`.

    Bin counts larger than the data supports are reduced to the number of
    distinct readings. With ``supervised`` set, each source is first
    discretized into ``fine_factor`` times its bin count and then grouped by
    :func:`supervised_bins`. ``auto_depth > 1`` enables auto-depth selection
    for the prior-usage source of the target kind.
    """

    sources: Mapping[str, SourceSpec] = field(default_factory=lambda: dict(DEFAULT_SOURCES))
    rule: str = "bayes"
    laplace: bool = True
    supervised: bool = False
    fine_factor: int = 10
    auto_depth: int = 0
    min_samples: float = DEFAULT_MIN_SAMPLES
    seed: int = 0

    def _fit_one(self, source: str, spec: SourceSpec, snaps: Sequence[ContextSnapshot],
                 n: int) -> Binning:
        distinct = distinct_count(source, snaps)
        if distinct == 0:
            return categorical_topn_bins([None] * len(snaps), 1, source)
        if spec.discretizer == "categorical_topn":
            return fit_binning(source, snaps, spec.discretizer, n, self.seed)
        return fit_binning(source, snaps, spec.discretizer, max(1, min(n, distinct)), self.seed)

    def fit_binnings(self, train: Sequence[LabeledEvent], vocab: Vocabulary) -> dict[str, Binning]:
        snaps = [e.context for e in train]
        out = {}
        for source, spec in self.sources.items():
            if not self.supervised:
                out[source] = self._fit_one(source, spec, snaps, spec.n_bins)
                continue
            if source in CONTINUOUS:
                f = self.fine_factor * spec.n_bins
            else:
                f = min(distinct_count(source, snaps) + 1, self.fine_factor * spec.n_bins)
            fine = self._fit_one(source, spec, snaps, f)
            out[source] = supervised_bins(fine, train, vocab, min(spec.n_bins, fine.n_bins), self.seed)
        return out

    def fit(self, train: Sequence[LabeledEvent], vocab: Vocabulary,
            binnings: Mapping[str, Binning] | None = None) -> CombinedEstimator:
        if not train:
            raise EstimationError("empty training set")
        if binnings is None:
            binnings = self.fit_binnings(train, vocab)
        tables = {s: build_table(train, b, vocab) for s, b in binnings.items()}
        class_counts = np.bincount(_outcomes(train, vocab), minlength=vocab.k)
        depth = {}
        if self.auto_depth > 1:
            src = PRIOR_SOURCES[vocab.kind]
            if src in binnings:
                depth[src] = build_depth_tables(train, vocab.kind, self.auto_depth, binnings[src],
                                                vocab, int(min(self.min_samples, 2**31)))
        return CombinedEstimator(vocab, tables, class_counts, self.rule, self.laplace, depth,
                                 self.min_samples)


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


__all__ = [
    "CombinedEstimator", "DepthTable", "EstimatorSpec", "PosteriorTable", "ResponseSet",
    "SourceSpec", "accuracy", "auto_depth_posterior", "build_depth_tables", "build_table",
    "combine", "combine_many", "estimate", "hits", "laplace_posterior", "laplace_rows", "map_estimate",
    "select_depth", "supervised_bins", "top_mass", "total_variation",
]
