import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtext import encoder as enc
from flowtext.tokenizer import TokenSequence, batch_arrays
from flowtext.trainer import OptimizerState, adamw_update

from gradcheck import pattern, relative_errors


def tiny_config(**kw):
    base = dict(vocab_size=23, n_layers=2, hidden_dim=16, n_heads=2, ffn_dim=32, max_positions=8,
                dropout_rate=0.1, init_std=0.5, dtype="float64")
    base.update(kw)
    return enc.EncoderConfig(**base)


def seq(ids, n_real=None):
    n_real = len(ids) if n_real is None else n_real
    return TokenSequence(tuple(ids), (1,) * n_real + (0,) * (len(ids) - n_real), (0,) * len(ids))


def random_batch(rng, n=3, length=8, n_real=6, vocab=23):
    out = []
    for _ in range(n):
        ids = [2] + [int(t) for t in rng.integers(5, vocab, n_real - 1)] + [0] * (length - n_real)
        out.append(seq(ids, n_real))
    return out


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

def test_init_is_deterministic_per_seed():
    cfg = enc.EncoderConfig.desk(120)
    a, b = enc.init_params(cfg, 1), enc.init_params(cfg, 1)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = enc.init_params(cfg, 2)
    assert a["tok_emb"].tobytes() != c["tok_emb"].tobytes()


def test_init_biases_zero_gains_one_weights_truncated():
    cfg = enc.EncoderConfig.desk(120)
    params = enc.init_params(cfg, 3)
    assert set(params) == set(enc.param_shapes(cfg))
    for name, arr in params.items():
        short = name.rsplit(".", 1)[-1]
        assert arr.shape == enc.param_shapes(cfg)[name]
        if short.endswith("_g"):
            assert np.all(arr == 1.0)
        elif short.startswith("b") or short.endswith("_b"):
            assert np.all(arr == 0.0), name
        else:
            assert np.abs(arr).max() <= 2 * cfg.init_std + 1e-9, name


def test_config_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        enc.EncoderConfig(10, hidden_dim=10, n_heads=4)


def test_presets():
    d = enc.EncoderConfig.desk(50)
    assert (d.n_layers, d.hidden_dim, d.n_heads, d.activation) == (2, 128, 4, "relu")
    b = enc.EncoderConfig.base(50)
    assert (b.n_layers, b.hidden_dim, b.n_heads) == (12, 768, 12)


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

def test_embed_zero_tables_give_zero():
    params = {k: np.zeros(s) for k, s in enc.param_shapes(tiny_config()).items()}
    assert np.all(enc.embed_sequence(seq([2, 7, 9, 3]), params) == 0)


def test_embed_same_token_differs_by_position_rows():
    params = enc.init_params(tiny_config(), 0)
    h = enc.embed_sequence(seq([2, 7, 7, 3]), params)
    np.testing.assert_array_equal(h[2] - h[1], params["pos_emb"][2] - params["pos_emb"][1])


def test_embed_hand_sum():
    params = {"tok_emb": np.array([[0.0, 0.0], [1.0, 2.0]]),
              "seg_emb": np.array([[10.0, 20.0], [0.0, 0.0]]),
              "pos_emb": np.array([[0.5, -0.5], [9.0, 9.0]])}
    h = enc.embed_sequence(TokenSequence((1,), (1,), (0,)), params)
    np.testing.assert_array_equal(h, [[11.5, 21.5]])


def test_embed_rejects_out_of_range_id():
    params = enc.init_params(tiny_config(), 0)
    with pytest.raises(ValueError):
        enc.embed_sequence(seq([2, 23]), params)


# ---------------------------------------------------------------------------
# attention and feed-forward
# ---------------------------------------------------------------------------

def identity_layer(d):
    eye, zero = np.eye(d), np.zeros(d)
    return {"wq": eye, "bq": zero, "wk": eye, "bk": zero, "wv": eye, "bv": zero,
            "wo": eye, "bo": zero}


def test_attention_singleton_attends_to_itself():
    rng = np.random.default_rng(0)
    p = {k: rng.normal(size=(4, 4)) if k.startswith("w") else rng.normal(size=4)
         for k in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}
    x = rng.normal(size=(3, 4))
    w = enc.attention_weights(x, [1, 0, 0], p, 2)
    np.testing.assert_allclose(w[:, :, 0], 1.0)
    out = enc.self_attention(x, [1, 0, 0], p, 2)
    np.testing.assert_allclose(out[0], (x[0] @ p["wv"] + p["bv"]) @ p["wo"] + p["bo"], atol=1e-12)


def test_attention_identical_values_pass_through():
    rng = np.random.default_rng(1)
    p = identity_layer(3)
    p["wq"] = rng.normal(size=(3, 3))
    p["wk"] = rng.normal(size=(3, 3))
    p["wv"] = np.zeros((3, 3))
    p["bv"] = np.array([0.3, -1.0, 2.0])
    out = enc.self_attention(rng.normal(size=(4, 3)), [1, 1, 1, 1], p, 1)
    np.testing.assert_allclose(out, np.tile(p["bv"], (4, 1)), atol=1e-12)


def test_attention_two_token_hand_case():
    x = np.array([[1.0, 2.0], [3.0, -1.0]])
    out = enc.self_attention(x, [1, 1], identity_layer(2), 1)
    for i in range(2):
        s = [x[i] @ x[0] / math.sqrt(2), x[i] @ x[1] / math.sqrt(2)]
        e = [math.exp(v) for v in s]
        w = [v / sum(e) for v in e]
        expect = [w[0] * x[0][j] + w[1] * x[1][j] for j in range(2)]
        np.testing.assert_allclose(out[i], expect, atol=1e-6)
    np.testing.assert_allclose(out[0], [1.111614, 1.832578], atol=1e-6)


def test_attention_rejects_all_masked():
    with pytest.raises(ValueError):
        enc.self_attention(np.ones((2, 2)), [0, 0], identity_layer(2), 1)


def test_feed_forward_examples():
    eye = np.eye(2)
    p = {"w1": eye, "b1": np.zeros(2), "w2": eye, "b2": np.zeros(2)}
    np.testing.assert_array_equal(enc.feed_forward(np.array([[-1.0, 2.0]]), p), [[0.0, 2.0]])
    p["b2"] = np.array([0.25, -4.0])
    np.testing.assert_array_equal(enc.feed_forward(np.zeros((1, 2)), p), [[0.25, -4.0]])


def test_feed_forward_random_against_formula():
    rng = np.random.default_rng(7)
    p = {"w1": rng.normal(size=(3, 3)), "b1": rng.normal(size=3),
         "w2": rng.normal(size=(3, 3)), "b2": rng.normal(size=3)}
    x = rng.normal(size=(1, 3))
    u = [sum(x[0, i] * p["w1"][i, j] for i in range(3)) + p["b1"][j] for j in range(3)]
    r = [max(v, 0.0) for v in u]
    expect = [sum(r[i] * p["w2"][i, j] for i in range(3)) + p["b2"][j] for j in range(3)]
    np.testing.assert_allclose(enc.feed_forward(x, p)[0], expect, atol=1e-6)
    g = [0.5 * v * (1 + math.erf(v / math.sqrt(2))) for v in u]
    expect = [sum(g[i] * p["w2"][i, j] for i in range(3)) + p["b2"][j] for j in range(3)]
    np.testing.assert_allclose(enc.feed_forward(x, p, "gelu")[0], expect, atol=1e-6)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def test_logits_shape_and_zero_head():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(0), n=5)
    logits, _ = enc.forward(batch, params, cfg, "eval")
    assert logits.shape == (5, 2)
    params["cls_w"][:] = 0
    logits, _ = enc.forward(batch, params, cfg, "eval")
    assert np.all(logits == 0)
    loss, _ = enc.loss_and_gradients(batch, [0, 1, 1, 0, 1], params, cfg, seed=4)
    assert loss == pytest.approx(math.log(2), abs=1e-12)


def test_extra_padding_leaves_eval_logits_unchanged():
    cfg = tiny_config(max_positions=16, dtype="float32", init_std=0.02)
    params = enc.init_params(cfg, 2)
    rng = np.random.default_rng(2)
    short = random_batch(rng, n=4, length=8, n_real=6)
    long = [seq(list(s.ids) + [0] * 8, 6) for s in short]
    a, _ = enc.forward(short, params, cfg, "eval")
    b, _ = enc.forward(long, params, cfg, "eval")
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_cls_only_matches_full_forward():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(3))
    a, _ = enc.forward(batch, params, cfg, "eval", cls_only=True)
    b, _ = enc.forward(batch, params, cfg, "eval", cls_only=False)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_eval_forward_is_pure_and_train_mode_is_seeded():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(4))
    a, _ = enc.forward(batch, params, cfg, "eval", seed=1)
    b, _ = enc.forward(batch, params, cfg, "eval", seed=2)
    assert a.tobytes() == b.tobytes()
    t1, _ = enc.forward(batch, params, cfg, "train", seed=1)
    t2, _ = enc.forward(batch, params, cfg, "train", seed=1)
    t3, _ = enc.forward(batch, params, cfg, "train", seed=2)
    assert t1.tobytes() == t2.tobytes()
    assert t1.tobytes() != t3.tobytes()


def test_forward_rejects_long_sequences():
    cfg = tiny_config(max_positions=4)
    params = enc.init_params(cfg, 0)
    with pytest.raises(ValueError):
        enc.forward([seq([2, 5, 6, 7, 3])], params, cfg)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 7))
def test_attention_rows_sum_to_one(seed, n_real):
    rng = np.random.default_rng(seed)
    cfg = tiny_config()
    params = enc.init_params(cfg, seed % 1000)
    batch = random_batch(rng, n=2, n_real=max(n_real, 2))
    _, tape = enc.forward(batch, params, cfg, "eval", cls_only=False)
    mask = np.array([s.attention_mask for s in batch])
    for layer in tape.layers:
        probs = layer[1][4]
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)
        assert np.all(probs * (mask[:, None, None, :] == 0) < 1e-12)


# ---------------------------------------------------------------------------
# losses and gradients
# ---------------------------------------------------------------------------

def test_duplicated_batch_keeps_mean_loss():
    cfg = tiny_config(dropout_rate=0.0)
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(5), n=4)
    y = [0, 1, 0, 1]
    a, _ = enc.loss_and_gradients(batch, y, params, cfg)
    b, _ = enc.loss_and_gradients(batch + batch, y + y, params, cfg)
    assert a == pytest.approx(b, abs=1e-9)


def test_mlm_without_masked_positions_is_an_error():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(0), n=1)
    with pytest.raises(ValueError):
        enc.loss_and_gradients(batch, [(batch[0].ids, {})], params, cfg, "mlm")


def test_bad_classification_labels():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(0), n=2)
    with pytest.raises(ValueError):
        enc.loss_and_gradients(batch, [0, 2], params, cfg)


def _log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _reference_loss(batch, labels, params, cfg, objective, seed):
    """Loss recomputed from the public forward pass plus the ReLU sign pattern."""
    if objective == "classification":
        logits, tape = enc.forward(batch, params, cfg, "train", seed, cls_only=True)
        loss = -_log_softmax(logits)[np.arange(len(labels)), labels].mean()
    else:
        corrupted = np.array([ids for ids, _ in labels])
        _, tape = enc.forward(batch, params, cfg, "train", seed, cls_only=False,
                              ids_override=corrupted)
        r, c, t = zip(*[(b, pos, o) for b, (_, m) in enumerate(labels) for pos, o in sorted(m.items())])
        scores = tape.final[list(r), list(c)] @ params["tok_emb"].T
        loss = -_log_softmax(scores)[np.arange(len(t)), list(t)].mean()
    return loss, pattern(*[layer[5] > 0 for layer in tape.layers])


# (activation, objective, seed); ReLU seeds are ones whose pre-activations
# keep their signs under every perturbation, so the difference quotient
# never straddles the kink (the check asserts this rather than assuming it).
GRAD_CASES = [("relu", "classification", 0), ("relu", "mlm", 1),
              ("gelu", "classification", 0), ("gelu", "mlm", 1)]


@pytest.mark.parametrize("activation,objective,seed", GRAD_CASES)
def test_gradients_match_finite_differences(activation, objective, seed):
    rng = np.random.default_rng(seed)
    cfg = tiny_config(activation=activation)
    params = enc.init_params(cfg, seed)
    for k in params:
        if not k.endswith("_g"):
            params[k] = params[k] + rng.normal(0, 0.1, params[k].shape)
    batch = [TokenSequence(tuple(int(t) for t in rng.integers(5, 23, 8)), (1,) * 6 + (0, 0),
                           (0,) * 4 + (1,) * 4) for _ in range(3)]
    if objective == "classification":
        labels = np.array([0, 1, 1])
    else:
        labels = []
        for s in batch:
            ids = list(s.ids)
            ids[2] = 4
            labels.append((tuple(ids), {2: s.ids[2], 3: s.ids[3]}))
    loss, grads = enc.loss_and_gradients(batch, labels, params, cfg, objective, seed=5)
    ref, _ = _reference_loss(batch, labels, params, cfg, objective, 5)
    assert loss == pytest.approx(ref, abs=1e-12)
    errors, crossings = relative_errors(
        lambda: _reference_loss(batch, labels, params, cfg, objective, 5), params, grads)
    if activation == "relu":
        assert crossings == []
    assert set(errors) == set(params)
    worst = max(errors, key=errors.get)
    assert errors[worst] < 1e-5, (worst, errors[worst])


def test_memorizes_sixteen_examples():
    cfg = tiny_config(vocab_size=30, dropout_rate=0.0, init_std=0.02, dtype="float64",
                      max_positions=8)
    params = enc.init_params(cfg, 0)
    rng = np.random.default_rng(0)
    batch = random_batch(rng, n=16, vocab=30)
    y = np.array([i % 2 for i in range(16)])
    state = OptimizerState.zeros_like(params)
    losses = []
    for _ in range(50):
        loss, grads = enc.loss_and_gradients(batch, y, params, cfg, seed=0)
        losses.append(loss)
        adamw_update(params, grads, state, 1e-2)
    final, _ = enc.loss_and_gradients(batch, y, params, cfg, mode="eval")
    assert final < 0.05
    assert losses[-1] < losses[0]


def test_batch_arrays_roundtrip_is_accepted():
    cfg = tiny_config()
    params = enc.init_params(cfg, 0)
    batch = random_batch(np.random.default_rng(0))
    a, _ = enc.forward(batch, params, cfg)
    b, _ = enc.forward(batch_arrays(batch), params, cfg)
    assert a.tobytes() == b.tobytes()
