import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxdep.discretize import (CELL, GPS, TIME, Binning, BinningError, categorical_topn_bins,
                               eqfreq_kmeans_bins, equal_frequency_bins, equal_width_bins, fit_binning,
                               kmeans_bins, lloyd)

from conftest import make_event


def wcss(X, labels):
    return sum(((X[labels == j] - X[labels == j].mean(axis=0)) ** 2).sum() for j in set(labels.tolist()))


# -- equal width ---------------------------------------------------------------

def test_equal_width_two_bins_boundary_at_midpoint():
    b = equal_width_bins(list(range(11)), 2)
    assert b.boundaries == (5.0,)
    assert b.assign(7.3) == 1


def test_equal_width_single_bin():
    b = equal_width_bins([1.0, 5.0, 9.0], 1)
    assert b.n_bins == 1
    assert set(b.assign_many([1.0, 5.0, 9.0]).tolist()) == {0}


def test_equal_width_widths_by_arithmetic():
    rng = np.random.default_rng(0)
    vals = rng.uniform(3, 17, 500)
    b = equal_width_bins(vals.tolist(), 10)
    edges = np.array([vals.min(), *b.boundaries, vals.max()])
    assert np.allclose(np.diff(edges), (vals.max() - vals.min()) / 10)


def test_equal_width_clamps_outside_range():
    b = equal_width_bins([0.0, 10.0], 4)
    assert b.assign(-100.0) == 0
    assert b.assign(1e6) == 3


def test_equal_width_degenerate_range_rejected():
    with pytest.raises(BinningError):
        equal_width_bins([2.0, 2.0], 3)


# -- equal frequency ------------------------------------------------------------

@pytest.mark.parametrize("values,n,pops", [(range(1, 11), 2, [5, 5]), (range(1, 10), 3, [3, 3, 3])])
def test_equal_frequency_populations(values, n, pops):
    b = equal_frequency_bins([float(v) for v in values], n)
    assert b.info["populations"] == pops


def test_equal_frequency_skewed_sample_counts():
    rng = np.random.default_rng(1)
    vals = (rng.pareto(1.2, 997) + 1).tolist()
    b = equal_frequency_bins(vals, 20)
    pops = np.bincount(b.assign_many(vals), minlength=b.n_bins)
    assert pops.max() - pops.min() <= 1


def test_equal_frequency_ties_collapse_with_warning():
    vals = [1.0] * 8 + [2.0, 3.0]
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        b = equal_frequency_bins(vals, 3)
    assert b.n_bins < 3
    assert any("collapsed" in str(x.message) for x in w)


def test_missing_values_get_appended_bin():
    b = equal_frequency_bins([1.0, 2.0, None, 3.0, 4.0], 2)
    assert b.n_bins == 3
    assert b.assign(None) == 2


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=20, max_size=200, unique=True),
       st.integers(1, 10))
def test_equal_frequency_property(vals, n):
    b = equal_frequency_bins(vals, n)
    pops = np.bincount(b.assign_many(vals), minlength=b.n_bins)
    assert b.n_bins == n
    assert pops.max() - pops.min() <= 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=2, max_size=100), st.integers(1, 12))
def test_equal_width_assignment_in_range(vals, n):
    if min(vals) == max(vals) and n > 1:
        return
    b = equal_width_bins(vals, n)
    out = b.assign_many(vals + [min(vals) - 1, max(vals) + 1])
    assert out.min() >= 0 and out.max() < b.n_bins
    # monotone: larger values never land in lower bins
    order = np.argsort(vals, kind="stable")
    assert np.all(np.diff(b.assign_many([vals[i] for i in order])) >= 0)


# -- k-means --------------------------------------------------------------------

def test_kmeans_two_clouds_match_exhaustive_wcss():
    rng = np.random.default_rng(2)
    pts = np.vstack([rng.normal([40.0, -75.0], 0.001, (6, 2)), rng.normal([40.05, -75.05], 0.001, (6, 2))])
    b = kmeans_bins([tuple(p) for p in pts], 2, seed=0)
    got = b.assign_many([tuple(p) for p in pts])
    X = pts.copy()
    X[:, 1] *= b.lon_scale
    best = min((wcss(X, np.array((0,) + lab)), (0,) + lab)
               for lab in itertools.product((0, 1), repeat=len(pts) - 1) if len(set((0,) + lab)) == 2)
    assert wcss(X, got) == pytest.approx(best[0])
    assert set(got[:6].tolist()) != set(got[6:].tolist())


def test_kmeans_single_cluster_is_mean():
    X = np.array([[0.0, 0.0], [2.0, 4.0], [4.0, 2.0]])
    C, labels = lloyd(X, 1, seed=5)
    assert np.allclose(C[0], X.mean(axis=0))
    assert set(labels.tolist()) == {0}


def test_kmeans_deterministic_under_seed():
    rng = np.random.default_rng(3)
    pts = [tuple(p) for p in rng.uniform(0, 1, (50, 2))]
    assert kmeans_bins(pts, 4, seed=9).centroids == kmeans_bins(pts, 4, seed=9).centroids


def test_kmeans_missing_gps_gets_dedicated_bin():
    pts = [(0.0, 0.0), (0.0, 1.0), None, (1.0, 0.0)]
    b = kmeans_bins(pts, 2, seed=0)
    assert b.n_bins == 3
    assert b.assign(None) == 2


# -- equal-frequency k-means ------------------------------------------------------

def test_eqfreq_kmeans_collinear_matches_exhaustive_equal_split():
    xs = [0.0, 1.0, 2.0, 10.0, 11.0, 12.0]
    pts = [(x, 0.0) for x in xs]
    b = eqfreq_kmeans_bins(pts, 2, seed=0)
    got = b.assign_many(pts)
    X = np.array(pts)
    best = min(itertools.combinations(range(6), 3),
               key=lambda a: wcss(X, np.array([0 if i in a else 1 for i in range(6)])))
    assert b.info["sizes"] == [3, 3]
    assert {frozenset(i for i in range(6) if got[i] == c) for c in (0, 1)} == {
        frozenset(best), frozenset(set(range(6)) - set(best))}


def test_eqfreq_kmeans_ceil_peeling_sizes():
    rng = np.random.default_rng(4)
    pts = [tuple(p) for p in rng.uniform(0, 0.1, (10, 2))]
    b = eqfreq_kmeans_bins(pts, 3, seed=0)
    assert b.info["sizes"] == [4, 3, 3]
    assert not b.info["relaxed"]


def test_eqfreq_kmeans_identical_points_relax():
    pts = [(1.0, 1.0)] * 6
    b = eqfreq_kmeans_bins(pts, 2, seed=0)
    assert b.info["relaxed"]
    assert b.info["sizes"] == [6]
    assert b.n_bins == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_eqfreq_kmeans_sizes_floor_or_ceil(m, k, seed):
    if m < k:
        return
    rng = np.random.default_rng(seed)
    pts = [tuple(p) for p in rng.uniform(0, 1, (m, 2))]
    b = eqfreq_kmeans_bins(pts, k, seed=0)
    assert not b.info["relaxed"]
    assert sum(b.info["sizes"]) == m
    assert set(b.info["sizes"]) <= {m // k, math.ceil(m / k)}


# -- categorical --------------------------------------------------------------------

def test_categorical_topn_other_bin():
    labels = ["a"] * 50 + ["b"] * 30 + ["c"] * 15 + ["d"] * 5
    b = categorical_topn_bins(labels, 3)
    assert b.categories == ("a", "b")
    assert [b.assign(x) for x in "abcd"] == [0, 1, 2, 2]
    assert b.assign("z") == 2


def test_categorical_single_bin():
    b = categorical_topn_bins(list("abcab"), 1)
    assert b.n_bins == 1
    assert set(b.assign_many(list("abcz")).tolist()) == {0}


def test_categorical_shrinks_when_few_labels():
    b = categorical_topn_bins(["a", "b"], 10)
    assert b.n_bins == 3


# -- fitting from snapshots and serialization ---------------------------------------------

def test_fit_binning_from_snapshots_and_json_round_trip():
    evs = [make_event("x", tod=float(t), gps=(40 + t / 1e4, -75.0), cell=f"c{t % 3}") for t in range(100)]
    snaps = [e.context for e in evs]
    for source, disc in ((TIME, "equal_freq"), (TIME, "equal_width"), (GPS, "kmeans"),
                         (GPS, "eqfreq_kmeans"), (CELL, "categorical_topn")):
        b = fit_binning(source, snaps, disc, 4, seed=1)
        again = Binning.from_dict(b.to_dict())
        assert again == b
        assert np.array_equal(again.assign_snapshots(snaps), b.assign_snapshots(snaps))
        assert np.array_equal(b.assign_snapshots(snaps), [b.assign(s.gps if source == GPS else
                                                                   s.cell_id if source == CELL else
                                                                   s.time_of_cycle) for s in snaps])


def test_unknown_discretizer_rejected():
    with pytest.raises(BinningError):
        fit_binning(TIME, [make_event("x").context], "bogus", 2)
