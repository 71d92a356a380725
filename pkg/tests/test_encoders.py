import numpy as np
import pytest

from climacredit import autodiff as ad
from climacredit.autodiff import ParamStore, Tensor
from climacredit import encoders as enc
import oracles


def make(kind, input_dim=3, hidden=8, layers=2, heads=2, ff=16, max_len=10, positional=True, seed=0):
    cfg = enc.EncoderConfig(kind, input_dim, hidden, layers, heads, ff, max_len, positional)
    store = ParamStore()
    e = enc.build_encoder(cfg, store, "e", np.random.default_rng(seed))
    return e, store


def gradcheck_encoder(kind, seed=0):
    e, store = make(kind, seed=seed)
    gen = np.random.default_rng(seed + 100)
    x = gen.normal(size=(3, 5, 3))
    mask = np.ones((3, 5), dtype=bool)
    mask[1, 3:] = False
    weights = gen.normal(size=(3, 8))
    # move layer-norm and bias parameters off their symmetric initial values
    for name in store:
        store[name].data = store[name].data + gen.normal(0, 0.1, store[name].shape)

    def loss():
        return ad.tsum(ad.mul(e.encode(Tensor(x), mask), weights))

    def loss_value():
        with ad.no_grad():
            return float(loss().data)

    store.zero_grad()
    loss().backward()
    arrays = {n: store[n].data for n in store}
    grads = {n: store[n].grad if store[n].grad is not None else np.zeros_like(store[n].data) for n in store}
    return oracles.probe_gradients(arrays, grads, loss_value, 20, gen)


@pytest.mark.parametrize("kind", enc.KINDS)
def test_encoder_gradients(kind):
    assert gradcheck_encoder(kind) <= 1e-4


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_recurrent_zero_weights_zero_output(kind):
    e, store = make(kind)
    for n in store:
        store[n].data = np.zeros_like(store[n].data)
    out = e.encode(Tensor(np.zeros((2, 4, 3)))).data
    np.testing.assert_array_equal(out, 0.0)


@pytest.mark.parametrize("kind", ["LSTM", "GRU"])
def test_recurrent_outputs_bounded(kind):
    e, store = make(kind)
    for n in store:
        store[n].data = store[n].data * 20
    out = e.encode(Tensor(np.random.default_rng(0).normal(0, 10, (4, 6, 3)))).data
    assert (np.abs(out) < 1).all()


def test_lstm_single_step_is_one_cell():
    e, store = make("LSTM", layers=1)
    x = np.random.default_rng(1).normal(size=(2, 1, 3))
    gates = x[:, 0] @ store["e.l0.W"].data + store["e.l0.b"].data
    sig = 1 / (1 + np.exp(-gates[:, :24]))
    c = sig[:, :8] * np.tanh(gates[:, 24:])
    h = sig[:, 16:24] * np.tanh(c)
    np.testing.assert_allclose(e.encode(Tensor(x)).data, h, atol=1e-12)


def test_gru_forced_update_drops_carried_state():
    e, store = make("GRU", layers=1)
    gen = np.random.default_rng(2)
    x = gen.normal(size=(1, 5, 3))
    prev = e.encode(Tensor(x[:, :4]), forced_update=1.0).data
    W, U, b, bh = (store[f"e.l0.{k}"].data for k in ("W", "U", "b", "bh"))
    step, recur = x[:, 4] @ W + b, prev @ U
    r = 1 / (1 + np.exp(-(step[:, :8] + recur[:, :8])))
    candidate = np.tanh(step[:, 16:] + r * (recur[:, 16:] + bh))
    np.testing.assert_allclose(e.encode(Tensor(x), forced_update=1.0).data, candidate, atol=1e-12)
    # with no recurrent weights the candidate, hence the output, sees only the last input
    store["e.l0.U"].data = np.zeros_like(U)
    store["e.l0.bh"].data = np.zeros_like(bh)
    other = x.copy()
    other[:, :4] = gen.normal(size=(1, 4, 3))
    np.testing.assert_allclose(e.encode(Tensor(x), forced_update=1.0).data, e.encode(Tensor(other), forced_update=1.0).data, atol=1e-12)


def test_recurrent_padding_keeps_last_valid_state():
    e, _ = make("GRU")
    x = np.random.default_rng(3).normal(size=(1, 5, 3))
    padded = np.concatenate([x, np.random.default_rng(4).normal(size=(1, 3, 3))], axis=1)
    mask = np.r_[np.ones(5), np.zeros(3)].astype(bool)[None]
    np.testing.assert_allclose(e.encode(Tensor(padded), mask).data, e.encode(Tensor(x)).data, atol=1e-12)


def test_positional_encoding_position_zero():
    pe = enc.sinusoidal_positions(4, 8)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)


def test_zero_query_key_gives_mean_of_values():
    store = ParamStore()
    gen = np.random.default_rng(0)
    D = 4
    for name in "qkvo":
        store.add(f"a.W{name}", gen.normal(size=(D, D)) if name in "vo" else np.zeros((D, D)))
        store.add(f"a.b{name}", np.zeros(D))
    store["a.Wo"].data = np.eye(D)
    x = gen.normal(size=(2, 5, D))
    out, weights = enc.multi_head_attention(Tensor(x), store, "a", heads=2)
    np.testing.assert_allclose(weights.data, 0.2, atol=1e-15)
    values = x @ store["a.Wv"].data
    np.testing.assert_allclose(out.data, np.repeat(values.mean(axis=1, keepdims=True), 5, axis=1), atol=1e-12)


def test_attention_rows_and_padding_mass():
    e, _ = make("TRANSFORMER")
    x = np.random.default_rng(5).normal(size=(2, 6, 3))
    mask = np.ones((2, 6), dtype=bool)
    mask[0, 2:] = False
    e.encode(Tensor(x), mask)
    for w in e.last_attention:
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
        # key index 0 is the classification token, so padded inputs sit at 3..6
        assert (w[0, :, :, 3:] == 0.0).all()


def test_transformer_padding_invariance():
    e, _ = make("TRANSFORMER")
    x = np.random.default_rng(6).normal(size=(1, 4, 3))
    padded = np.concatenate([x, np.ones((1, 2, 3)) * 9], axis=1)
    mask = np.array([[1, 1, 1, 1, 0, 0]], dtype=bool)
    np.testing.assert_allclose(e.encode(Tensor(padded), mask).data, e.encode(Tensor(x)).data, atol=1e-12)


def test_transformer_permutation_invariant_without_positions():
    e, _ = make("TRANSFORMER", positional=False)
    x = np.random.default_rng(7).normal(size=(2, 6, 3))
    perm = np.random.default_rng(8).permutation(6)
    np.testing.assert_allclose(e.encode(Tensor(x[:, perm])).data, e.encode(Tensor(x)).data, atol=1e-12)
    with_pos, _ = make("TRANSFORMER", positional=True)
    assert not np.allclose(with_pos.encode(Tensor(x[:, perm])).data, with_pos.encode(Tensor(x)).data)


def test_sequence_too_long():
    e, _ = make("TRANSFORMER", max_len=4)
    with pytest.raises(enc.SequenceTooLong):
        e.encode(Tensor(np.zeros((1, 5, 3))))


def test_config_validation():
    with pytest.raises(enc.EncoderError):
        enc.EncoderConfig("TRANSFORMER", 3, hidden_size=10, heads=4)
    with pytest.raises(enc.EncoderError):
        enc.EncoderConfig("CNN")
    assert enc.EncoderConfig().max_seq_len == 326


# -- vocabulary -------------------------------------------------------------------------


def test_vocab_ids_and_oov():
    vocab = enc.TokenVocab.fit([["b", "a"], ["a", "c"]])
    assert vocab.ids(["a", "zzz"]) == [3, vocab.oov_id]
    assert (vocab.pad_id, vocab.oov_id, vocab.cls_id) == (0, 1, 2)
    again = enc.TokenVocab.from_json(vocab.to_json())
    assert again.token_to_id == vocab.token_to_id


def test_vocab_batch_padding_and_truncation():
    vocab = enc.TokenVocab.fit([["a", "b", "c"]])
    ids, mask = vocab.batch([["a", "b", "c"], ["c"]], max_seq_len=2)
    assert ids.tolist() == [[3, 4], [5, 0]]
    assert mask.tolist() == [[True, True], [True, False]]


def test_empty_text_single_pad_finite_latent():
    vocab = enc.TokenVocab.fit([["a"]])
    ids, mask = vocab.batch([[]], 8)
    assert ids.shape == (1, 1) and not mask.any()
    e, store = make("TRANSFORMER", input_dim=4)
    table = Tensor(np.random.default_rng(0).normal(size=(len(vocab), 4)))
    out = e.encode(ad.embedding_lookup(table, ids), mask).data
    assert np.isfinite(out).all()
    g, _ = make("GRU", input_dim=4)
    np.testing.assert_array_equal(g.encode(ad.embedding_lookup(table, ids), mask).data, 0.0)


def test_embedding_table_file(tmp_path):
    path = tmp_path / "emb.txt"
    path.write_text("a\t1 2\n<oov>\t9 9\nb\t3 4\n", encoding="utf-8")
    table = enc.load_embedding_table(path)
    vocab = enc.TokenVocab(["a", "c"])
    mat = enc.embedding_matrix(vocab, table)
    np.testing.assert_array_equal(mat[vocab.token_to_id["a"]], [1, 2])
    np.testing.assert_array_equal(mat[vocab.token_to_id["c"]], [9, 9])
    np.testing.assert_array_equal(mat[0], [0, 0])
    path.write_text("a\t1 2\nb\t3\n", encoding="utf-8")
    with pytest.raises(enc.EncoderError):
        enc.load_embedding_table(path)
