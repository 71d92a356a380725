import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from climacredit import metrics as mt
import oracles


def scored(seed, n, quality=1.0, ties=False):
    gen = np.random.default_rng(seed)
    y = gen.integers(0, 2, n)
    y[:2] = [0, 1]
    s = gen.normal(size=n) + quality * y
    if ties:
        s = np.round(s, 1)
    return s, y


# -- AUC ------------------------------------------------------------------------------


def test_auc_examples():
    assert mt.auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert mt.auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert mt.auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_single_class_rejected():
    for f in (mt.auc, mt.ks, mt.h_measure):
        with pytest.raises(mt.SingleClass):
            f([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 200), st.booleans())
def test_auc_equals_pair_count(seed, n, ties):
    s, y = scored(seed, n, ties=ties)
    assert mt.auc(s, y) == oracles.auc_pairs(s, y)


# -- KS -------------------------------------------------------------------------------


def test_ks_examples():
    assert mt.ks([0.2, 0.6, 0.4, 0.8], [0, 0, 1, 1]) == 0.5
    assert mt.ks([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert mt.ks([0.1, 0.5, 0.1, 0.5], [0, 0, 1, 1]) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 200), st.booleans())
def test_ks_equals_threshold_scan(seed, n, ties):
    s, y = scored(seed, n, ties=ties)
    assert mt.ks(s, y) == oracles.ks_scan(s, y)


# -- H --------------------------------------------------------------------------------


def test_h_extremes():
    assert mt.h_measure([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == pytest.approx(1.0, abs=1e-12)
    assert mt.h_measure([0.4] * 10, [0, 1] * 5) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_h_matches_integration_oracle(seed):
    s, y = scored(seed, 150, quality=0.8, ties=seed % 2 == 0)
    assert mt.h_measure(s, y) == pytest.approx(oracles.h_measure_grid(s, y), abs=1e-6)


def test_h_imbalanced_matches_oracle():
    gen = np.random.default_rng(9)
    y = (gen.random(400) < 0.05).astype(int)
    s = gen.normal(size=400) + 1.2 * y
    assert mt.h_measure(s, y) == pytest.approx(oracles.h_measure_grid(s, y), abs=1e-6)


def test_h_improves_when_labels_agree_more():
    gen = np.random.default_rng(3)
    s = gen.normal(size=2000)
    truth = (s > 0).astype(int)
    values = []
    for flip in (0.4, 0.25, 0.1):
        y = np.where(gen.random(2000) < flip, 1 - truth, truth)
        values.append(mt.h_measure(s, y))
    assert values[0] < values[1] < values[2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(4, 120))
def test_monotone_transform_invariance(seed, n):
    s, y = scored(seed, n, ties=True)
    t = np.exp(2 * s) + 3
    assert mt.auc(t, y) == mt.auc(s, y)
    assert mt.ks(t, y) == mt.ks(s, y)
    assert abs(mt.h_measure(t, y) - mt.h_measure(s, y)) <= 1e-12
    assert 0.0 <= mt.h_measure(s, y) <= 1.0


def test_hull_is_concave_and_spans():
    s, y = scored(1, 80)
    fpr, tpr, *_ = mt.roc_points(s, y)
    hx, hy = mt.roc_hull(fpr, tpr)
    assert (hx[0], hy[0], hx[-1], hy[-1]) == (0.0, 0.0, 1.0, 1.0)
    dx, dy = np.diff(hx), np.diff(hy)
    # consecutive edges turn clockwise
    assert np.all(dx[:-1] * dy[1:] - dy[:-1] * dx[1:] < 0)


# -- bootstrap ------------------------------------------------------------------------


def runs_for(n, seeds=5):
    return [scored(100 + k, n, quality=1.0) for k in range(seeds)]


def test_bootstrap_counts_and_determinism():
    runs = runs_for(120)
    a = mt.bootstrap_summary(runs, resamples=50, master_seed=1)
    b = mt.bootstrap_summary(runs, resamples=50, master_seed=1)
    for m in mt.METRICS:
        assert a[m].n == 250
        np.testing.assert_array_equal(a[m].estimates, b[m].estimates)
        assert a[m].ci_low <= a[m].mean <= a[m].ci_high
    c = mt.bootstrap_summary(runs, resamples=50, master_seed=2)
    assert not np.array_equal(a["AUC"].estimates, c["AUC"].estimates)


def test_bootstrap_ci_shrinks_with_test_size():
    narrow = mt.bootstrap_summary(runs_for(2000, 1), resamples=200, metrics=("AUC",))["AUC"]
    wide = mt.bootstrap_summary(runs_for(200, 1), resamples=200, metrics=("AUC",))["AUC"]
    assert narrow.ci_high - narrow.ci_low < wide.ci_high - wide.ci_low


def test_bootstrap_skips_unrecoverable_resamples():
    s = np.linspace(0, 1, 40)
    y = np.zeros(40, int)
    y[0] = 1
    with pytest.warns(RuntimeWarning):
        out = mt.bootstrap_summary([(s, y)], resamples=30, master_seed=0, metrics=("AUC",), max_redraws=0)
    assert out["AUC"].n < 30


def test_report_rows_shape():
    summary = mt.bootstrap_summary(runs_for(60, 2), resamples=10)
    rows = mt.report_rows("GRU", "S+C", summary)
    assert [r["metric"] for r in rows] == ["AUC", "KS", "H"]
    assert set(rows[0]) == {"model", "modality", "metric", "mean", "ci_low", "ci_high"}


# -- Spearman -------------------------------------------------------------------------


def test_spearman_examples():
    assert mt.spearman([1, 2, 3, 4], [1, 3, 2, 4]) == (pytest.approx(0.8, abs=1e-12), False)
    assert mt.spearman([1, 2, 3], [1, 2, 3])[0] == 1.0
    assert mt.spearman([1, 2, 3], [3, 2, 1])[0] == -1.0
    assert mt.spearman([1, 1, 1], [1, 2, 3]) == (0.0, True)


def test_spearman_matrix_symmetric():
    gen = np.random.default_rng(0)
    vecs = {"a": gen.random(30), "b": gen.random(30), "flat": np.ones(30)}
    mat, flagged = mt.spearman_matrix(vecs)
    np.testing.assert_array_equal(mat.to_numpy(), mat.to_numpy().T)
    np.testing.assert_array_equal(np.diag(mat.to_numpy()), 1.0)
    assert flagged == [("a", "flat"), ("b", "flat")]
