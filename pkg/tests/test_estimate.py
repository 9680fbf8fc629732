import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ctxdep.discretize import CELL, PRIOR_SOURCES, TIME, categorical_topn_bins, equal_width_bins
from ctxdep.estimate import (CombinedEstimator, EstimationError, EstimatorSpec, PosteriorTable, SourceSpec,
                             auto_depth_posterior, build_depth_tables, build_table, combine, hits,
                             laplace_posterior, laplace_rows, map_estimate, select_depth, supervised_bins,
                             top_mass, total_variation)
from ctxdep.trace import UsageKind, Vocabulary

from conftest import chained, make_event

APP = UsageKind.APP


def vocab(*labels):
    return Vocabulary(APP, tuple(labels))


def table_from(rows, source=TIME):
    counts = np.asarray(rows, dtype=np.int64)
    return PosteriorTable(source, categorical_topn_bins(["x"], 1, source), counts, counts.sum(axis=0))


# -- posterior tables and the Laplace correction ----------------------------------

def test_table_counts_single_outcome():
    evs = [make_event("a", 1.0) for _ in range(4)]
    t = build_table(evs, equal_width_bins([0.0, 10.0], 2), vocab("a", "b"))
    assert t.counts[0].tolist() == [4, 0]
    assert t.priors.tolist() == [1.0, 0.0]


def test_table_disjoint_bins_reproduce_conditionals():
    evs = [make_event("a", 1.0)] * 300 + [make_event("b", 9.0)] * 700
    t = build_table(evs, equal_width_bins([0.0, 10.0], 2), vocab("a", "b"))
    raw = t.counts / t.counts.sum(axis=1, keepdims=True)
    assert np.allclose(raw, [[1, 0], [0, 1]])
    assert np.allclose(t.posterior(1), [2 / 702 * 0.3, (700 + 2 * 0.7) / 702])


def test_table_rebuild_identical():
    evs = [make_event(lab, float(i)) for i, lab in enumerate("abcabca")]
    b = equal_width_bins([0.0, 6.0], 3)
    t1, t2 = build_table(evs, b, vocab(*"abc")), build_table(evs, b, vocab(*"abc"))
    assert np.array_equal(t1.counts, t2.counts)


def test_laplace_empty_bin_returns_priors():
    t = table_from([[0, 0, 0], [5, 3, 2]])
    assert np.array_equal(t.posterior(0), t.priors)


def test_laplace_direct_formula():
    t = table_from([[3, 1], [1, 3]])
    assert np.allclose(laplace_posterior(t, 0), [4 / 6, 2 / 6])


def test_laplace_large_counts_approach_frequency():
    t = table_from([[3000, 1000], [1000, 3000]])
    assert np.abs(t.posterior(0) - [0.75, 0.25]).max() < 1e-3


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 50), min_size=2, max_size=8), st.data())
def test_laplace_rows_is_distribution(counts, data):
    k = len(counts)
    prior_counts = np.array(data.draw(st.lists(st.integers(1, 20), min_size=k, max_size=k)), dtype=float)
    priors = prior_counts / prior_counts.sum()
    row = np.asarray(counts)
    p = laplace_rows(row, row.sum(), priors)
    assert p.sum() == pytest.approx(1.0)
    assert (p > 0).all()
    # shrinks toward the prior: never farther from it than the raw frequency
    if row.sum():
        assert np.abs(p - priors).sum() <= np.abs(row / row.sum() - priors).sum() + 1e-12


# -- MAP response sets ----------------------------------------------------------------

def test_map_estimate_examples():
    assert map_estimate([0.5, 0.3, 0.2], 1) == map_estimate([0.5, 0.3, 0.2], 1)
    one, two = map_estimate([0.5, 0.3, 0.2], 1), map_estimate([0.5, 0.3, 0.2], 2)
    assert one.outcomes == (0,) and one.mass == 0.5
    assert two.outcomes == (0, 1) and two.mass == pytest.approx(0.8)
    assert map_estimate([0.25] * 4, 1).outcomes == (0,)


def test_map_estimate_rejects_bad_r():
    with pytest.raises(EstimationError):
        map_estimate([0.5, 0.5], 3)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.3, 0.5]), min_size=2, max_size=7), st.data())
def test_hits_and_top_mass_agree_with_map_estimate(weights, data):
    d = np.asarray(weights) + 1e-3
    d = d / d.sum()
    r = data.draw(st.integers(1, len(d)))
    rs = map_estimate(d, r)
    y = np.arange(len(d))
    got = hits(np.tile(d, (len(d), 1)), y, r)
    assert got.tolist() == [g in rs for g in y]
    assert top_mass(d, r)[0] == rs.mass


# -- combination rules ----------------------------------------------------------------

def test_max_rule_worked_example():
    priors = np.array([1 / 3, 1 / 3, 1 / 3])
    dists = [[0.8, 0.1, 0.1], [0.15, 0.7, 0.15], [0.2, 0.6, 0.2]]
    assert map_estimate(combine(dists, priors, "max")).outcomes == (0,)


def test_bayes_closed_form_uniform_prior():
    p = combine([[0.8, 0.2], [0.8, 0.2]], np.array([0.5, 0.5]), "bayes")
    assert np.allclose(p, [0.64 / 0.68, 0.04 / 0.68])
    assert np.round(p, 4).tolist() == [0.9412, 0.0588]


def test_mean_rule_closed_form():
    assert np.allclose(combine([[0.6, 0.4], [0.2, 0.8]], np.array([0.5, 0.5]), "mean"), [0.4, 0.6])


def test_bayes_uninformative_source_is_identity():
    priors = np.array([0.5, 0.3, 0.2])
    informative = [0.2, 0.7, 0.1]
    assert np.allclose(combine([informative, priors], priors), combine([informative], priors))


def test_combine_rejects_mismatched_and_unknown():
    with pytest.raises(EstimationError):
        combine([[0.5, 0.5], [0.2, 0.3, 0.5]], np.array([0.5, 0.5]))
    with pytest.raises(EstimationError):
        combine([[0.5, 0.5]], np.array([0.5, 0.5]), "product")


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 6), st.integers(1, 4), st.sampled_from(["bayes", "max", "mean"]), st.integers(0, 10**6))
def test_combined_is_distribution(k, n_src, rule, seed):
    rng = np.random.default_rng(seed)
    dists = [rng.dirichlet(np.ones(k)) + 1e-9 for _ in range(n_src)]
    dists = [d / d.sum() for d in dists]
    out = combine(dists, rng.dirichlet(np.ones(k)), rule)
    assert out.sum() == pytest.approx(1.0)
    assert (out >= 0).all()


def test_bayes_matches_brute_force_product():
    rng = np.random.default_rng(11)
    priors = rng.dirichlet(np.ones(5))
    dists = [rng.dirichlet(np.ones(5)) for _ in range(3)]
    brute = priors * np.prod([d / priors for d in dists], axis=0)
    assert np.allclose(combine(dists, priors), brute / brute.sum())


# -- the combined estimator -------------------------------------------------------------

def two_source_events(n=400, seed=0):
    rng = np.random.default_rng(seed)
    evs = []
    for i in range(n):
        lab = "ab"[int(rng.random() < 0.3)]
        tod = float(rng.uniform(0, 700) if lab == "a" else rng.uniform(700, 1400))
        cell = "c1" if (lab == "a") == (rng.random() < 0.8) else "c2"
        evs.append(make_event(lab, tod, ts=i, cell=cell))
    return evs


def test_single_source_one_bin_returns_top_priors():
    evs = [make_event(lab) for lab in "aaabbc"]
    est = EstimatorSpec({TIME: SourceSpec("categorical_topn", 1)}).fit(evs, vocab(*"abc"))
    assert est.estimate(evs[0].context, 2).outcomes == (0, 1)


def test_accuracy_full_response_set_is_one():
    evs = two_source_events()
    est = EstimatorSpec({TIME: SourceSpec("equal_freq", 4)}).fit(evs, vocab("a", "b"))
    assert est.accuracy(evs, 2) == 1.0


def test_priors_only_accuracy_is_modal_frequency():
    evs = two_source_events()
    est = EstimatorSpec({}).fit(evs, vocab("a", "b"))
    share = sum(e.label == "a" for e in evs) / len(evs)
    assert est.accuracy(evs, 1) == pytest.approx(max(share, 1 - share))


def test_accuracy_matches_per_event_check():
    evs = two_source_events(100, seed=1)
    est = EstimatorSpec({TIME: SourceSpec("equal_freq", 5), CELL: SourceSpec("categorical_topn", 3)}
                        ).fit(evs, vocab("a", "b"))
    count = sum(est.vocab.index(e.label) in est.estimate(e.context, 1) for e in evs)
    assert est.accuracy(evs, 1) == count / len(evs)


def test_estimator_json_round_trip():
    evs = two_source_events()
    est = EstimatorSpec({TIME: SourceSpec("equal_freq", 4), CELL: SourceSpec("categorical_topn", 3)}
                        ).fit(evs, vocab("a", "b"))
    again = CombinedEstimator.from_dict(est.to_dict())
    snaps = [e.context for e in evs]
    assert np.array_equal(again.distributions(snaps), est.distributions(snaps))


def test_source_order_does_not_change_result():
    evs = two_source_events()
    v = vocab("a", "b")
    s1 = EstimatorSpec({TIME: SourceSpec("equal_freq", 4), CELL: SourceSpec("categorical_topn", 3)})
    s2 = EstimatorSpec({CELL: SourceSpec("categorical_topn", 3), TIME: SourceSpec("equal_freq", 4)})
    snaps = [e.context for e in evs]
    assert np.array_equal(s1.fit(evs, v).distributions(snaps), s2.fit(evs, v).distributions(snaps))


def test_held_out_restores_tables_bit_identically():
    evs = two_source_events()
    est = EstimatorSpec({TIME: SourceSpec("equal_freq", 4), CELL: SourceSpec("categorical_topn", 3)}
                        ).fit(evs, vocab("a", "b"))
    before = {s: t.counts.copy() for s, t in est.tables.items()}
    cc = est.class_counts.copy()
    for ev in evs[:50]:
        with est.held_out(ev):
            pass
    assert all(np.array_equal(before[s], t.counts) for s, t in est.tables.items())
    assert np.array_equal(cc, est.class_counts)


def test_loo_vectorized_matches_held_out():
    evs = two_source_events(120, seed=2)
    est = EstimatorSpec({TIME: SourceSpec("equal_freq", 4), CELL: SourceSpec("categorical_topn", 3)}
                        ).fit(evs, vocab("a", "b"))
    loo = est.loo_distributions(evs)
    for i, ev in enumerate(evs):
        with est.held_out(ev):
            assert np.array_equal(est.distribution(ev.context), loo[i])


# -- supervised binning ---------------------------------------------------------------

def test_supervised_identical_vectors_merge_losslessly():
    evs = [make_event("a", 1.0)] * 10 + [make_event("a", 4.0)] * 10 + [make_event("b", 8.0)] * 10
    v = vocab("a", "b")
    fine = equal_width_bins([0.0, 10.0], 3)
    assert np.unique(build_table(evs, fine, v).posteriors(np.arange(3)), axis=0).shape[0] == 2
    grouped = supervised_bins(fine, evs, v, 2)
    assert grouped.groups[0] == grouped.groups[1] != grouped.groups[2]
    fine_acc = EstimatorSpec({TIME: SourceSpec("equal_width", 3)}).fit(evs, v).accuracy(evs)
    est = EstimatorSpec().fit(evs, v, binnings={TIME: grouped})
    assert est.accuracy(evs) == fine_acc


def test_supervised_orthogonal_vectors_identity():
    evs = [make_event(lab, t) for lab, t in (("a", 1.0), ("b", 4.0), ("c", 8.0)) for _ in range(50)]
    fine = equal_width_bins([0.0, 10.0], 3)
    grouped = supervised_bins(fine, evs, vocab(*"abc"), 3)
    assert sorted(grouped.groups) == [0, 1, 2]


def test_supervised_recovers_situation_partition():
    # 4 situations over 40 fine time bins; situation s covers bins {s, s+4, s+8, ...}
    rng = np.random.default_rng(3)
    dists = np.full((4, 8), 0.025)
    for s in range(4):
        dists[s, 2 * s] = dists[s, 2 * s + 1] = 0.425
    labels = [f"g{i}" for i in range(8)]
    evs = []
    for i in range(8000):
        fb = int(rng.integers(40))
        evs.append(make_event(labels[rng.choice(8, p=dists[fb % 4])], fb * 36 + 18.0, ts=i))
    v = vocab(*labels)
    fine = equal_width_bins([0.0, 1440.0], 40)
    grouped = supervised_bins(fine, evs, v, 4, seed=0)
    truth = [fb % 4 for fb in range(40)]
    pairs = {(g, t) for g, t in zip(grouped.groups, truth)}
    assert len(pairs) == 4 and len({g for g, _ in pairs}) == 4
    sup = EstimatorSpec().fit(evs, v, binnings={TIME: grouped}).accuracy(evs)
    simple = EstimatorSpec({TIME: SourceSpec("equal_width", 4)}).fit(evs, v).accuracy(evs)
    assert sup >= simple


# -- prior-usage depth ------------------------------------------------------------------

def test_depth_one_equals_prior_table():
    evs = chained(list("abacabadabac"))
    v = vocab(*"abcd")
    src = PRIOR_SOURCES[APP]
    binning = categorical_topn_bins([e.context.prior(APP)[0] if e.context.prior(APP) else None for e in evs],
                                    5, src)
    depth = build_depth_tables(evs, APP, 1, binning, v)[0]
    table = build_table(evs, binning, v)
    for ev in evs:
        key = depth.key(ev.context)
        b = table.binning.assign_snapshots([ev.context])[0]
        if key is not None:
            assert np.array_equal(depth.posterior(key), table.posterior(b))


def test_depth_two_alternating_sequence():
    evs = chained(list("ab" * 20))
    v = vocab("a", "b")
    binning = categorical_topn_bins(["a", "b"], 3, PRIOR_SOURCES[APP])
    t2 = build_depth_tables(evs, APP, 2, binning, v)[1]
    key = (binning.assign("b"), binning.assign("a"))  # most recent first: ... a, b -> next a
    row = t2.counts[key]
    assert row[v.index("a")] == row.sum() > 0


def test_depth_tuple_counts_sum_to_events_minus_depth():
    evs = chained([f"l{i % 7}" for i in range(60)])
    v = vocab(*[f"l{i}" for i in range(7)])
    binning = categorical_topn_bins([f"l{i}" for i in range(7)], 8, PRIOR_SOURCES[APP])
    for t in build_depth_tables(evs, APP, 3, binning, v):
        assert sum(int(r.sum()) for r in t.counts.values()) == len(evs) - t.depth


def depth_fixture(counts):
    """Depth tables whose observed tuple for ``snap`` has the given support at each depth."""
    v = vocab("a", "b")
    binning = categorical_topn_bins(["a", "b"], 3, PRIOR_SOURCES[APP])
    snap = make_event("a", prior={APP: ("a", "b", "a")}).context
    tables = build_depth_tables([make_event("a", prior={APP: ("a", "b", "a")})], APP, 3, binning, v)
    for t in tables:
        t.counts = {t.key(snap): np.array([counts[t.depth], 0])}
    return tables, snap


def test_auto_depth_example():
    tables, snap = depth_fixture({1: 200, 2: 15, 3: 4})
    assert select_depth(tables, snap, 10) == 2


def test_auto_depth_infinite_threshold_is_depth_one():
    tables, snap = depth_fixture({1: 200, 2: 150, 3: 100})
    assert select_depth(tables, snap, float("inf")) == 1


def test_auto_depth_unseen_tuples_give_priors():
    v = vocab("a", "b")
    binning = categorical_topn_bins(["a", "b"], 3, PRIOR_SOURCES[APP])
    evs = chained(list("aab"))
    tables = build_depth_tables(evs, APP, 2, binning, v)
    unseen = make_event("a", prior={APP: ("zz", "zz")}).context
    t = tables[0]
    t.counts = {}
    assert np.array_equal(auto_depth_posterior(tables, unseen), t.priors)


def test_total_variation():
    assert total_variation([1, 0], [0, 1]) == 1.0
    assert total_variation([0.5, 0.5], [0.5, 0.5]) == 0.0
