import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from climacredit import explain as ex
from climacredit import trainer as tr
from climacredit.encoders import TokenVocab
import oracles


def nonlinear(w):
    def f(X):
        X = np.atleast_2d(X)
        return np.tanh(X @ w) + 0.3 * X[:, 0] * X[:, -1] + 0.1 * np.sin(X[:, 1] * X[:, 2])

    return f


# -- kernel SHAP on analytic models ------------------------------------------------------


@pytest.mark.parametrize("m,budget", [(6, 2048), (20, 2048), (40, 1024)])
def test_linear_model_closed_form(m, budget):
    gen = np.random.default_rng(m)
    w = gen.normal(size=m)
    f = lambda X: np.atleast_2d(X) @ w
    x, bg = gen.normal(size=m), gen.normal(size=(15, m))
    res = ex.kernel_shap(f, x, bg, budget, gen=np.random.default_rng(0))
    np.testing.assert_allclose(res.values, w * (x - bg.mean(axis=0)), atol=1e-9)


@pytest.mark.parametrize("m", [3, 7, 12])
def test_exhaustive_matches_subset_oracle(m):
    gen = np.random.default_rng(m)
    f = nonlinear(gen.normal(size=m))
    x, bg = gen.normal(size=m), gen.normal(size=(10, m))
    res = ex.kernel_shap(f, x, bg, budget=(1 << m))
    assert res.exhaustive
    oracle = oracles.shapley_by_subsets(oracles.marginal_value(f, x, bg), m)
    np.testing.assert_allclose(res.values, oracle, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(14, 40))
def test_sampled_local_accuracy(seed, m):
    gen = np.random.default_rng(seed)
    f = nonlinear(gen.normal(size=m))
    x, bg = gen.normal(size=m), gen.normal(size=(10, m))
    res = ex.kernel_shap(f, x, bg, budget=512, gen=np.random.default_rng(seed))
    assert not res.exhaustive
    assert res.local_accuracy_gap <= 1e-3


def test_symmetric_features_share_credit():
    f = lambda X: np.tanh(np.atleast_2d(X)[:, 0] + np.atleast_2d(X)[:, 1]) + 0.2 * np.atleast_2d(X)[:, 2:].sum(axis=1)
    gen = np.random.default_rng(1)
    x = gen.normal(size=16)
    x[1] = x[0]
    bg = gen.normal(size=(10, 16))
    bg[:, 1] = bg[:, 0]
    res = ex.kernel_shap(f, x, bg, budget=600, gen=np.random.default_rng(2))
    assert abs(res.values[0] - res.values[1]) <= 1e-3


def test_inactive_features_get_zero():
    gen = np.random.default_rng(0)
    w = gen.normal(size=6)
    f = lambda X: np.atleast_2d(X) @ w
    x, bg = gen.normal(size=6), gen.normal(size=(5, 6))
    res = ex.kernel_shap(f, x, bg, active=[0, 2, 4])
    assert res.values[[1, 3, 5]].tolist() == [0.0, 0.0, 0.0]
    np.testing.assert_allclose(res.values[[0, 2, 4]], (w * (x - bg.mean(axis=0)))[[0, 2, 4]], atol=1e-12)


def test_budget_too_small():
    with pytest.raises(ex.BudgetTooSmall):
        ex.kernel_shap(lambda X: np.atleast_2d(X).sum(axis=1), np.zeros(20), np.zeros((2, 20)), budget=39)


def test_kernel_weight_values():
    assert ex.shapley_kernel_weight(4, 1) == pytest.approx(3 / (4 * 1 * 3))
    assert ex.shapley_kernel_weight(4, 2) == pytest.approx(3 / (6 * 2 * 2))


# -- case selection ------------------------------------------------------------------------


def test_uncertain_case_example():
    ps = np.array([0.1, 0.2, 0.5, 0.5, 0.5, 0.9])
    pc = np.array([0.1, 0.2, 0.7, 0.4, 0.5, 0.9])
    y = np.array([0, 0, 1, 1, 0, 1])
    cases = ex.select_uncertain_cases(ps, pc, y)
    assert cases.indices.tolist() == [2]
    assert cases.improvement[0] == pytest.approx(0.2)


def test_window_respected_and_ranked():
    gen = np.random.default_rng(0)
    ps, pc = gen.random(500), gen.random(500)
    y = gen.integers(0, 2, 500)
    cases = ex.select_uncertain_cases(ps, pc, y, top_k=25)
    lo, hi = np.percentile(ps, [30, 70])
    assert len(cases.indices) == 25
    assert ((ps[cases.indices] >= lo) & (ps[cases.indices] <= hi)).all()
    assert (np.diff(cases.improvement) <= 0).all()


def test_degenerate_window_flagged():
    cases = ex.select_uncertain_cases(np.full(6, 0.3), np.r_[np.full(3, 0.9), np.full(3, 0.1)], [1, 1, 1, 0, 0, 0])
    assert cases.degenerate and len(cases.indices) == 6


def test_empty_window():
    with pytest.raises(ex.EmptyWindow):
        ex.select_uncertain_cases([0.0, 1.0], [0.0, 1.0], [0, 1])


# -- aggregation ------------------------------------------------------------------------------


def test_factor_attribution_shapes():
    layout = ex.FeatureLayout.build(["a", "b"])
    zero = [ex.ShapResult(0.1, np.zeros(len(layout.names)), 0.1, True, 0)] * 3
    summary, dist = ex.factor_attribution(zero, layout)
    assert summary.factor.tolist() == ["di", "wlr", "ht", "cf"]
    assert (summary.mean_abs_shap == 0).all()
    assert len(dist) == 48
    assert dist.month_offset.tolist()[:12] == list(range(-12, 0))


# -- fusion model adapter ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def fitted():
    gen = np.random.default_rng(0)
    n = 160
    structured = gen.normal(size=(n, 2))
    climate = gen.normal(size=(n, 12, 4))
    y = (structured[:, 0] + climate[:, -1, 1] + gen.normal(0, 0.5, n) > 0).astype(int)
    vocab = TokenVocab(["a", "b", "c"])
    ids, mask = vocab.batch([list("abc"[: 1 + i % 3]) for i in range(n)], 4)
    data = tr.Dataset(y, structured, climate, ids, mask, [f"L{i}" for i in range(n)], vocab)
    split = tr.make_split(y, 0)
    cfg = dict(encoder="GRU", hidden_size=4, num_layers=1, text_embed_dim=4, max_epochs=2, patience=2)
    models = {code: tr.train(tr.ModelConfig(mask=tr.ModalityMask.parse(code), **cfg), data, split) for code in ("S+C", "S+C+T")}
    return data, split, models, cfg


@pytest.mark.parametrize("code", ["S+C", "S+C+T"])
def test_fusion_explainer_local_accuracy(fitted, code):
    data, split, models, _ = fitted
    explainer = ex.FusionExplainer(models[code].model, ["s0", "s1"], data)
    cases = split.test[:3]
    results = explainer.explain(cases, split.train[:8], budget=256, seed=0)
    probs = models[code].predict(data.subset(cases))
    for res, p in zip(results, probs):
        assert res.output == pytest.approx(p, abs=1e-12)
        assert res.local_accuracy_gap <= 1e-3
        if code == "S+C":
            assert res.values[explainer.layout.text] == 0.0
    frame = explainer.to_frame(cases, results)
    assert list(frame.columns) == ["loan_id", "feature", "factor", "month_offset", "feature_value", "shap_value", "base_value"]
    assert len(frame) == 3 * len(explainer.layout.names)


def test_flatten_round_trips_through_predict(fitted):
    data, split, models, _ = fitted
    explainer = ex.FusionExplainer(models["S+C+T"].model, ["s0", "s1"], data)
    idx = split.test[:10]
    np.testing.assert_allclose(explainer.predict(explainer.flatten(idx)), models["S+C+T"].predict(data.subset(idx)), atol=1e-12)


def test_background_sampling_deterministic():
    a = ex.sample_background(np.arange(500), 100, seed=3)
    assert a.tolist() == ex.sample_background(np.arange(500), 100, seed=3).tolist()
    assert len(set(a)) == 100


def test_per_factor_ablation_layout(fitted):
    data, split, _, cfg = fitted
    base = tr.ModelConfig(mask=tr.ModalityMask.parse("S"), **cfg)
    report, matrix = ex.per_factor_ablation(base, data, split, seeds=(0,), resamples=20)
    assert sorted(report.model.unique()) == sorted(["S", "S+DI", "S+WLR", "S+HT", "S+CF"])
    assert len(report) == 5 * 3
    assert matrix.shape == (5, 5)
