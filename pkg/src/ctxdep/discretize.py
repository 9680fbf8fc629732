"""Unsupervised binning of context sources.

Every fitted :class:`Binning` is a total map from a raw context value (or
``None`` for a missing reading) to a bin index.
"""

from __future__ import annotations

import bisect
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Hashable, Sequence

import numpy as np

from .trace import KINDS, ContextSnapshot, UsageKind, rank_labels

METERS_PER_DEGREE = 111_320.0
RELAX_RADIUS_M = 5.0
KMEANS_TOL = 1e-9
KMEANS_MAX_ITER = 100

TIME = "time"
MOVEMENT = "movement"
GPS = "gps"
CELL = "cell"
PRIOR_SOURCES = {k: f"prior_{k.value}" for k in KINDS}
SOURCES: tuple[str, ...] = (TIME, MOVEMENT, GPS, CELL, *PRIOR_SOURCES.values())

DISCRETIZERS = ("equal_width", "equal_freq", "kmeans", "eqfreq_kmeans", "categorical_topn")


class BinningError(ValueError):
    pass


def raw_value(snapshot: ContextSnapshot, source: str) -> Any:
    """Extract the raw reading of ``source`` from a snapshot (``None`` if missing)."""
    if source == TIME:
        return snapshot.time_of_cycle
    if source == MOVEMENT:
        return snapshot.accel_log_power
    if source == GPS:
        return snapshot.gps
    if source == CELL:
        return snapshot.cell_id
    if source.startswith("prior_"):
        chain = snapshot.prior(UsageKind(source[len("prior_"):]))
        return chain[0] if chain else None
    raise KeyError(f"unknown context source {source!r}")


@dataclass(frozen=True)
class Binning:
    """A fitted map from one context source to ``{0..n_bins-1}``.

    Only the parameters relevant to ``kind`` are populated: ``boundaries``
    for 1-D kinds, ``centroids``/``lon_scale`` for gps clusterings,
    ``categories`` for categorical binning, ``fine``/``groups`` for
    supervised binning. ``missing_bin`` is the index missing readings map
    to; for numeric kinds it is an extra bin appended when the fitting
    sample had missing readings, otherwise 0.
    """

    source: str
    kind: str
    n_bins: int
    boundaries: tuple[float, ...] = ()
    centroids: tuple[tuple[float, float], ...] = ()
    lon_scale: float = 1.0
    categories: tuple[str, ...] = ()
    fine: Binning | None = None
    groups: tuple[int, ...] = ()
    missing_bin: int = 0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "_cat", {c: i for i, c in enumerate(self.categories)})

    # -- assignment -------------------------------------------------------
    def assign(self, raw: Any) -> int:
        if raw is None:
            return self.missing_bin
        kind = self.kind
        if kind in ("equal_width", "equal_freq"):
            return bisect.bisect_right(self.boundaries, float(raw))
        if kind in ("kmeans", "eqfreq_kmeans"):
            lat, lon = raw
            c = np.asarray(self.centroids)
            d = (c[:, 0] - lat) ** 2 + (c[:, 1] - lon * self.lon_scale) ** 2
            return int(np.argmin(d))
        if kind == "categorical_topn":
            return self._cat.get(raw, self.n_bins - 1)  # type: ignore[attr-defined]
        if kind == "supervised":
            assert self.fine is not None
            return self.groups[self.fine.assign(raw)]
        raise BinningError(f"unknown binning kind {kind!r}")

    def assign_many(self, raws: Sequence[Any]) -> np.ndarray:
        if self.kind in ("equal_width", "equal_freq"):
            vals = np.array([np.nan if r is None else float(r) for r in raws], dtype=float)
            out = np.searchsorted(np.asarray(self.boundaries, dtype=float), vals, side="right")
            out[np.isnan(vals)] = self.missing_bin
            return out.astype(np.int64)
        if self.kind in ("kmeans", "eqfreq_kmeans"):
            missing = np.array([r is None for r in raws])
            pts = np.array([(0.0, 0.0) if r is None else r for r in raws], dtype=float).reshape(-1, 2)
            pts[:, 1] *= self.lon_scale
            c = np.asarray(self.centroids)
            d = ((pts[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
            out = np.argmin(d, axis=1)
            out[missing] = self.missing_bin
            return out.astype(np.int64)
        if self.kind == "supervised":
            assert self.fine is not None
            return np.asarray(self.groups, dtype=np.int64)[self.fine.assign_many(raws)]
        return np.fromiter((self.assign(r) for r in raws), dtype=np.int64, count=len(raws))

    def assign_snapshots(self, snapshots: Sequence[ContextSnapshot]) -> np.ndarray:
        return self.assign_many([raw_value(s, self.source) for s in snapshots])

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        d: dict[str, Any] = {"source": self.source, "kind": self.kind, "n_bins": self.n_bins,
                             "missing_bin": self.missing_bin}
        if self.boundaries:
            d["boundaries"] = list(self.boundaries)
        if self.centroids:
            d["centroids"] = [list(c) for c in self.centroids]
            d["lon_scale"] = self.lon_scale
        if self.categories:
            d["categories"] = list(self.categories)
        if self.fine is not None:
            d["fine"] = self.fine.to_dict()
            d["groups"] = list(self.groups)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> Binning:
        return cls(
            source=d["source"],
            kind=d["kind"],
            n_bins=int(d["n_bins"]),
            boundaries=tuple(d.get("boundaries", ())),
            centroids=tuple(tuple(c) for c in d.get("centroids", ())),
            lon_scale=float(d.get("lon_scale", 1.0)),
            categories=tuple(d.get("categories", ())),
            fine=cls.from_dict(d["fine"]) if "fine" in d else None,
            groups=tuple(d.get("groups", ())),
            missing_bin=int(d.get("missing_bin", 0)),
        )


def _split_missing(values: Sequence[Any]) -> tuple[list[Any], bool]:
    present = [v for v in values if v is not None]
    return present, len(present) < len(values)


def _with_missing(n: int, has_missing: bool) -> tuple[int, int]:
    """(n_bins, missing_bin) for a numeric binning with ``n`` fitted bins."""
    return (n + 1, n) if has_missing else (n, 0)


# --------------------------------------------------------------------------
# 1-D discretizers
# --------------------------------------------------------------------------

def equal_width_bins(values: Sequence[float | None], n: int, source: str = TIME) -> Binning:
    """``n`` equal-width intervals over ``[min, max]``; outside values clamp to edge bins."""
    if n < 1:
        raise BinningError("n must be >= 1")
    present, has_missing = _split_missing(values)
    if not present:
        raise BinningError("no values to fit")
    lo, hi = float(min(present)), float(max(present))
    if n > 1 and lo == hi:
        raise BinningError("degenerate range: all values identical")
    span = hi - lo
    # lo + span * (i / n) keeps the 2n-bin edges an exact superset of the n-bin edges
    bounds = tuple(lo + span * (i / n) for i in range(1, n))
    n_bins, missing = _with_missing(n, has_missing)
    return Binning(source, "equal_width", n_bins, boundaries=bounds, missing_bin=missing,
                   info={"range": (lo, hi)})


def equal_frequency_bins(values: Sequence[float | None], n: int, source: str = TIME) -> Binning:
    """Boundaries at empirical quantiles (midpoints between adjacent order statistics).

    Ties can make two boundaries coincide; the duplicate collapses, the bin
    count shrinks and a warning is issued.
    """
    if n < 1:
        raise BinningError("n must be >= 1")
    present, has_missing = _split_missing(values)
    s = np.sort(np.asarray(present, dtype=float))
    m = len(s)
    if m < n:
        raise BinningError(f"{m} values cannot fill {n} bins")
    if n > len(np.unique(s)):
        raise BinningError(f"n={n} exceeds the number of distinct values")
    bounds: list[float] = []
    for j in range(1, n):
        q = (j * m) // n
        b = 0.5 * (s[q - 1] + s[q])
        if bounds and b <= bounds[-1]:
            continue
        bounds.append(float(b))
    if len(bounds) < n - 1:
        warnings.warn(
            f"{source}: ties collapsed {n - 1 - len(bounds)} equal-frequency boundaries",
            stacklevel=2,
        )
    k = len(bounds) + 1
    pops = np.bincount(np.searchsorted(bounds, s, side="right"), minlength=k)
    n_bins, missing = _with_missing(k, has_missing)
    return Binning(source, "equal_freq", n_bins, boundaries=tuple(bounds), missing_bin=missing,
                   info={"populations": pops.tolist()})


# --------------------------------------------------------------------------
# k-means
# --------------------------------------------------------------------------

def lloyd(X: np.ndarray, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd's k-means on rows of ``X`` with farthest-point initialization.

    The first center is drawn with ``seed``; the rest are the points farthest
    from the chosen centers (lowest index on ties). Iterates until no center
    moves by ``KMEANS_TOL`` or ``KMEANS_MAX_ITER`` is reached.

    Returns
    -------
    centers : ndarray, shape (k, d)
    labels : ndarray, shape (n,)
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if k < 1:
        raise BinningError("k must be >= 1")
    if len(np.unique(X, axis=0)) < k:
        raise BinningError(f"fewer than k={k} distinct points")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    centers = [X[first]]
    d2 = ((X - X[first]) ** 2).sum(axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(d2))
        centers.append(X[nxt])
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    C = np.array(centers)
    for _ in range(KMEANS_MAX_ITER):
        dist = _sqdist(X, C)
        labels = np.argmin(dist, axis=1)
        sizes = np.bincount(labels, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, labels, X)
        newC = C.copy()
        full = sizes > 0
        newC[full] = sums[full] / sizes[full, None]
        for j in np.flatnonzero(~full):
            # re-seed an emptied cluster at the worst-served point
            far = int(np.argmax(dist[np.arange(n), labels]))
            newC[j] = X[far]
            labels[far] = j
        shift = np.sqrt(((newC - C) ** 2).sum(axis=1)).max()
        C = newC
        if shift < KMEANS_TOL:
            break
    return C, np.argmin(_sqdist(X, C), axis=1)


def _sqdist(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of ``X`` and rows of ``C``."""
    d = (X * X).sum(axis=1)[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _project(points: Sequence[tuple[float, float]], lon_scale: float | None = None):
    P = np.asarray(points, dtype=float).reshape(-1, 2)
    if lon_scale is None:
        lon_scale = math.cos(math.radians(float(P[:, 0].mean())))
    Q = P.copy()
    Q[:, 1] *= lon_scale
    return Q, lon_scale


def kmeans_bins(points: Sequence[tuple[float, float] | None], k: int, seed: int = 0,
                source: str = GPS) -> Binning:
    """k-means clustering of gps fixes on an equirectangular projection."""
    present, has_missing = _split_missing(points)
    if len(present) < k:
        raise BinningError(f"{len(present)} points cannot form {k} clusters")
    Q, lon_scale = _project(present)
    C, labels = lloyd(Q, k, seed)
    n_bins, missing = _with_missing(k, has_missing)
    return Binning(source, "kmeans", n_bins, centroids=tuple(map(tuple, C.tolist())),
                   lon_scale=lon_scale, missing_bin=missing,
                   info={"sizes": np.bincount(labels, minlength=k).tolist()})


def eqfreq_kmeans_bins(points: Sequence[tuple[float, float] | None], k: int, seed: int = 0,
                       source: str = GPS) -> Binning:
    """Equal-frequency k-means by iterative peeling.

    Run k-means on the unassigned points, take the most populous cluster and
    give it the ``ceil(remaining / clusters_left)`` points nearest its mean;
    repeat with one cluster fewer. The size constraint is relaxed so that
    coincident points are never split and so that a peeled cluster whose
    radius would fall below 5 m absorbs every point within 5 m.
    """
    present, has_missing = _split_missing(points)
    m = len(present)
    if k < 1:
        raise BinningError("k must be >= 1")
    if m < k:
        raise BinningError(f"{m} points cannot form {k} clusters")
    Q, lon_scale = _project(present)
    relax_deg = RELAX_RADIUS_M / METERS_PER_DEGREE
    remaining = np.arange(m)
    centroids: list[np.ndarray] = []
    sizes: list[int] = []
    relaxed = False
    for left in range(k, 0, -1):
        if len(remaining) == 0:
            break
        R = Q[remaining]
        target = math.ceil(len(remaining) / left)
        if left == 1:
            take = np.arange(len(remaining))
        else:
            c = min(left, len(np.unique(R, axis=0)))
            C, labels = lloyd(R, c, seed)
            big = int(np.argmax(np.bincount(labels, minlength=c)))
            mean = C[big]
            dist = np.sqrt(((R - mean) ** 2).sum(axis=1))
            order = np.lexsort((np.arange(len(R)), dist))
            cutoff = dist[order[target - 1]]
            if cutoff < relax_deg:
                cutoff = relax_deg
            take = np.flatnonzero(dist <= cutoff)
            if len(take) != target:
                relaxed = True
        members = remaining[take]
        centroids.append(Q[members].mean(axis=0))
        sizes.append(len(members))
        remaining = np.setdiff1d(remaining, members, assume_unique=True)
    n_bins, missing = _with_missing(len(centroids), has_missing)
    return Binning(source, "eqfreq_kmeans", n_bins,
                   centroids=tuple(tuple(c.tolist()) for c in centroids),
                   lon_scale=lon_scale, missing_bin=missing,
                   info={"sizes": sizes, "relaxed": relaxed, "requested": k})


# --------------------------------------------------------------------------
# categorical
# --------------------------------------------------------------------------

def categorical_topn_bins(labels: Sequence[Hashable | None], n: int, source: str = CELL) -> Binning:
    """Top ``n-1`` categories get their own bin; everything else (and missing) is "other"."""
    if n < 1:
        raise BinningError("n must be >= 1")
    ranked = rank_labels(lab for lab in labels if lab is not None)
    top = tuple(str(lab) for lab, _ in ranked[: n - 1])
    n_bins = len(top) + 1
    counts = Counter(labels)
    return Binning(source, "categorical_topn", n_bins, categories=top, missing_bin=n_bins - 1,
                   info={"other_count": sum(c for lab, c in counts.items() if lab not in set(top))})


def assign_bin(binning: Binning, raw: Any) -> int:
    return binning.assign(raw)


def fit_binning(source: str, snapshots: Sequence[ContextSnapshot], discretizer: str, n: int,
                seed: int = 0) -> Binning:
    """Fit ``discretizer`` with ``n`` bins to the readings of ``source``."""
    raws = [raw_value(s, source) for s in snapshots]
    if discretizer == "equal_width":
        return equal_width_bins(raws, n, source)
    if discretizer == "equal_freq":
        return equal_frequency_bins(raws, n, source)
    if discretizer == "kmeans":
        return kmeans_bins(raws, n, seed, source)
    if discretizer == "eqfreq_kmeans":
        return eqfreq_kmeans_bins(raws, n, seed, source)
    if discretizer == "categorical_topn":
        return categorical_topn_bins(raws, n, source)
    raise BinningError(f"unknown discretizer {discretizer!r}")


def distinct_count(source: str, snapshots: Sequence[ContextSnapshot]) -> int:
    return len({raw_value(s, source) for s in snapshots} - {None})
