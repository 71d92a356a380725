import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from climacredit import autodiff as ad
from climacredit.autodiff import Tensor
import oracles


def leaf(gen, *shape, scale=1.0):
    return Tensor(gen.normal(0, scale, size=shape), requires_grad=True)


def check_op(build, leaves, seed=0, probes=None, tol=1e-4):
    """Reverse mode against central differences for a scalar loss built from ``leaves``."""
    gen = np.random.default_rng(seed)
    out_shape = build().shape
    weights = gen.normal(size=out_shape)

    def loss_value():
        with ad.no_grad():
            return float(np.sum(build().data * weights))

    for t in leaves:
        t.grad = None
    ad.tsum(ad.mul(build(), weights)).backward()
    arrays = {str(i): t.data for i, t in enumerate(leaves)}
    grads = {str(i): t.grad for i, t in enumerate(leaves)}
    total = sum(a.size for a in arrays.values())
    err = oracles.probe_gradients(arrays, grads, loss_value, min(probes or total, total), gen)
    assert err <= tol


# -- forward values ---------------------------------------------------------------------


def test_sigmoid_value_and_slope():
    x = Tensor(np.zeros(1), requires_grad=True)
    y = ad.sigmoid(x)
    y.backward(np.ones(1))
    assert y.data[0] == 0.5
    assert x.grad[0] == 0.25


def test_softmax_uniform():
    np.testing.assert_array_equal(ad.softmax(Tensor(np.zeros(4))).data, [0.25] * 4)


def test_matmul_hand_product():
    a = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    b = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    np.testing.assert_array_equal(ad.matmul(Tensor(a), Tensor(b)).data, [[1.0, 2.0], [4.0, 5.0]])


def test_shape_mismatch():
    with pytest.raises(ad.ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeMismatch):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_non_finite_is_error():
    with pytest.raises(ad.NonFiniteError):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(ad.NonFiniteError):
        ad.exp(Tensor(np.array([1e4])))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax(Tensor(x), axis=-1).data
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_mask_gives_exact_zero():
    x = Tensor(np.random.default_rng(0).normal(size=(2, 5)))
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0]], dtype=bool)
    out = ad.softmax(x, axis=-1, mask=mask).data
    assert (out[~mask] == 0.0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 8)), elements=st.floats(-100, 100)))
def test_layer_norm_moments(x):
    if np.any(x.std(axis=-1) < 1e-3):
        return
    out = ad.layer_norm(Tensor(x)).data
    assert np.abs(out.mean(axis=-1)).max() <= 1e-10
    np.testing.assert_allclose(out.var(axis=-1), 1.0, atol=1e-8)


def test_mean_pool_ignores_masked():
    x = Tensor(np.arange(12.0).reshape(1, 4, 3))
    pooled = ad.mean_pool(x, np.array([[1, 1, 0, 0]], dtype=bool)).data
    np.testing.assert_allclose(pooled, [[1.5, 2.5, 3.5]])


def test_embedding_lookup_rows():
    table = Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True)
    out = ad.embedding_lookup(table, np.array([[3, 3, 0]]))
    np.testing.assert_array_equal(out.data, [[[6, 7], [6, 7], [0, 1]]])
    ad.tsum(out).backward()
    np.testing.assert_array_equal(table.grad[:, 0], [1, 0, 0, 2])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert y._parents == ()


def test_gradient_accumulates_over_reuse():
    x = Tensor(np.array([3.0]), requires_grad=True)
    ad.add(ad.mul(x, x), x).backward(np.ones(1))
    assert x.grad[0] == 7.0


# -- gradients of primitives ------------------------------------------------------------


def test_grad_elementwise():
    gen = np.random.default_rng(1)
    a, b = leaf(gen, 3, 4), leaf(gen, 4)
    check_op(lambda: ad.mul(ad.sub(a, b), ad.add(a, b)), [a, b])
    check_op(lambda: ad.sigmoid(a), [a])
    check_op(lambda: ad.tanh(a), [a])
    check_op(lambda: ad.gelu(a), [a])
    check_op(lambda: ad.exp(ad.mul(a, 0.3)), [a])
    check_op(lambda: ad.log(ad.add(ad.mul(a, a), 1.0)), [a])
    check_op(lambda: ad.neg(a), [a])


def test_grad_structural():
    gen = np.random.default_rng(2)
    a, b, c = leaf(gen, 2, 3, 4), leaf(gen, 4, 5), leaf(gen, 2, 3, 2)
    m = gen.random((2, 3, 4)) > 0.5
    check_op(lambda: ad.matmul(a, b), [a, b])
    check_op(lambda: ad.linear(a, b, Tensor(np.ones(5))), [a, b])
    check_op(lambda: ad.concat([a, c], axis=-1), [a, c])
    check_op(lambda: ad.stack([a, a], axis=1), [a])
    check_op(lambda: a[:, 1:, ::2], [a])
    check_op(lambda: ad.getitem(a, (np.array([0, 0, 1]), slice(None))), [a])
    check_op(lambda: ad.transpose(ad.reshape(a, (6, 4)), (1, 0)), [a])
    check_op(lambda: ad.tsum(a, axis=1), [a])
    check_op(lambda: ad.tmean(a, axis=(0, 2), keepdims=True), [a])
    check_op(lambda: ad.blend(a, ad.mul(a, a), m.astype(float)), [a])
    check_op(lambda: ad.mean_pool(a, m[:, :, 0]), [a])


def test_grad_softmax_and_norm():
    gen = np.random.default_rng(3)
    a = leaf(gen, 2, 3, 5)
    g, bias = leaf(gen, 5), leaf(gen, 5)
    mask = np.ones((2, 3, 5), dtype=bool)
    mask[..., 3:] = False
    check_op(lambda: ad.softmax(a, axis=-1), [a])
    check_op(lambda: ad.softmax(a, axis=-1, mask=mask), [a])
    check_op(lambda: ad.layer_norm(a, g, bias), [a, g, bias])


def test_grad_embedding():
    gen = np.random.default_rng(4)
    table = leaf(gen, 6, 3)
    check_op(lambda: ad.embedding_lookup(table, np.array([[0, 5, 5], [2, 2, 1]])), [table])


# -- BCE ------------------------------------------------------------------------------


def test_bce_hand_values():
    assert ad.bce_loss(Tensor([0.8, 0.4]), [1, 0]).item() == pytest.approx((-math.log(0.8) - math.log(0.6)) / 2, abs=1e-12)
    assert ad.bce_loss(Tensor([0.8, 0.4]), [1, 0]).item() == pytest.approx(0.36699, abs=1e-5)
    assert ad.bce_loss(Tensor([0.5] * 7), [1, 0, 1, 0, 0, 1, 1]).item() == pytest.approx(math.log(2), abs=1e-12)


def test_bce_perfect_prediction():
    assert ad.bce_loss(Tensor([1.0, 0.0, 1.0]), [1, 0, 1]).item() <= 1.2e-7


def test_bce_empty_batch():
    with pytest.raises(ad.EmptyBatch):
        ad.bce_loss(Tensor(np.zeros(0)), [])


def test_bce_gradient():
    gen = np.random.default_rng(5)
    logits = leaf(gen, 20)
    y = gen.integers(0, 2, 20)
    probs_of = lambda: ad.sigmoid(logits)

    def loss_value():
        with ad.no_grad():
            return float(ad.bce_loss(probs_of(), y).data)

    logits.grad = None
    ad.bce_loss(probs_of(), y).backward()
    err = oracles.probe_gradients({"x": logits.data}, {"x": logits.grad}, loss_value, 20, gen)
    assert err <= 1e-4


def test_bce_positive_weight():
    base = ad.bce_loss(Tensor([0.3, 0.3]), [1, 0]).item()
    weighted = ad.bce_loss(Tensor([0.3, 0.3]), [1, 0], pos_weight=2.0).item()
    assert weighted == pytest.approx(base + (-math.log(0.3)) / 2, abs=1e-12)


# -- Adam -------------------------------------------------------------------------------


def test_adam_zero_gradient_noop():
    store = ad.ParamStore()
    store.add("w", np.array([1.0, -2.0]))
    ad.adam_step(store, 0.1, {"w": np.zeros(2)})
    np.testing.assert_array_equal(store["w"].data, [1.0, -2.0])


def test_adam_first_step_is_signed_lr():
    store = ad.ParamStore()
    store.add("w", np.zeros(3))
    g = np.array([0.5, -3.0, 1e-3])
    ad.adam_step(store, 0.01, {"w": g})
    np.testing.assert_allclose(store["w"].data, -0.01 * np.abs(g) / (np.abs(g) + 1e-8) * np.sign(g), rtol=1e-12)


def test_adam_constant_gradient_step_size():
    store = ad.ParamStore()
    store.add("w", np.zeros(1))
    previous = 0.0
    for _ in range(500):
        ad.adam_step(store, 0.01, {"w": np.array([2.0])})
        step = previous - store["w"].data[0]
        previous = store["w"].data[0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_rejects_non_finite_without_mutation():
    store = ad.ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step(store, 0.1, {"a": np.ones(2), "b": np.array([np.nan, 0.0])})
    np.testing.assert_array_equal(store["a"].data, np.ones(2))
    assert store.step == 0


def test_adam_skips_frozen():
    store = ad.ParamStore()
    store.add("a", np.ones(2))
    store.add("b", np.ones(2))
    store.freeze(["a"])
    digest = store.digest(["a"])
    ad.adam_step(store, 0.1, {"a": np.ones(2), "b": np.ones(2)})
    assert store.digest(["a"]) == digest
    assert store["b"].data[0] < 1.0


# -- store and randomness -------------------------------------------------------------


def test_param_store_round_trip(tmp_path):
    gen = np.random.default_rng(0)
    store = ad.ParamStore()
    store.add("x.w", gen.normal(size=(3, 2)))
    store.add("x.b", gen.normal(size=2))
    store.save(tmp_path / "p.json")
    again = ad.ParamStore.load(tmp_path / "p.json")
    assert again.digest() == store.digest()
    assert again.names("x.") == ["x.w", "x.b"]
    with pytest.raises(KeyError):
        store.add("x.w", np.zeros(1))


def test_rng_streams_deterministic_and_distinct():
    a = ad.Rng(7).stream("init").normal(size=4)
    b = ad.Rng(7).stream("init").normal(size=4)
    c = ad.Rng(7).stream("shuffle").normal(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_glorot_bounds():
    w = ad.glorot_uniform(np.random.default_rng(0), 10, 6)
    assert np.abs(w).max() <= math.sqrt(6 / 16)
