import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mortseq import lstm
from mortseq.errors import (DivergenceDetected, EmptySequence, MissingCache, SequenceTooLong,
                            ShapeMismatch)
from mortseq.gradcheck import check_lstm, random_chain
from mortseq.icd import IcdCode, encode_chain


def small_cfg(**kw):
    base = dict(n_classes=3, input_dim=6, hidden=5, dropout=0.0, seed=0)
    base.update(kw)
    return lstm.NetworkConfig(**base)


def rand_params(cfg, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    return {k: rng.normal(0, scale, size=s) for k, s in lstm.tensor_shapes(cfg).items()}


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def straight_line_cell(x, h, c, P, layer, H):
    """Scalar loops over the six gate equations, no stacking or vectorization."""
    W, U, b = P[f"l{layer}.W"], P[f"l{layer}.U"], P[f"l{layer}.b"]
    h_new, c_new = np.zeros(H), np.zeros(H)
    for j in range(H):
        pre = {}
        for k, gate in enumerate("ifog"):
            r = k * H + j
            pre[gate] = b[r] + sum(W[r, d] * x[d] for d in range(len(x))) + sum(U[r, d] * h[d] for d in range(H))
        i, f, o = _sig(pre["i"]), _sig(pre["f"]), _sig(pre["o"])
        g = math.tanh(pre["g"])
        c_new[j] = f * c[j] + i * g
        h_new[j] = o * math.tanh(c_new[j])
    return h_new, c_new


def test_zero_weights_cell():
    cfg = small_cfg()
    P = {k: np.zeros(s) for k, s in lstm.tensor_shapes(cfg).items()}
    st_ = lstm.cell_forward(np.ones(6), lstm.LstmState(np.zeros(5), np.zeros(5)), P, 1)
    for gate in "ifo":
        np.testing.assert_array_equal(st_.cache[gate], 0.5)
    np.testing.assert_array_equal(st_.cache["g"], 0.0)
    np.testing.assert_array_equal(st_.c, 0.0)
    np.testing.assert_array_equal(st_.h, 0.0)


def test_saturated_forget_gate_carries_memory():
    cfg = small_cfg()
    P = {k: np.zeros(s) for k, s in lstm.tensor_shapes(cfg).items()}
    P["l1.b"][5:10] = 50.0  # f -> 1
    P["l1.b"][0:5] = -50.0  # i -> 0
    c_prev = np.linspace(-2, 2, 5)
    st_ = lstm.cell_forward(np.ones(6), lstm.LstmState(np.zeros(5), c_prev), P, 1)
    np.testing.assert_allclose(st_.c, c_prev, atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_cell_matches_straight_line(seed):
    cfg = small_cfg()
    P = rand_params(cfg, seed)
    rng = np.random.default_rng(100 + seed)
    for layer, d_in in ((1, 6), (2, 5)):
        x, h, c = rng.normal(size=d_in), rng.uniform(-1, 1, 5), rng.normal(size=5)
        got = lstm.cell_forward(x, lstm.LstmState(h, c), P, layer)
        ref_h, ref_c = straight_line_cell(x, h, c, P, layer, 5)
        np.testing.assert_allclose(got.h, ref_h, rtol=0, atol=1e-12)
        np.testing.assert_allclose(got.c, ref_c, rtol=0, atol=1e-12)


def test_cell_shape_check():
    cfg = small_cfg()
    P = rand_params(cfg)
    with pytest.raises(ShapeMismatch):
        lstm.cell_forward(np.ones(7), lstm.LstmState(np.zeros(5), np.zeros(5)), P, 1)


def test_sequence_forward_modes():
    cfg = small_cfg()
    P = rand_params(cfg, 1)
    X = np.random.default_rng(2).normal(size=(1, 6))
    a, fa = lstm.sequence_forward(X, P, cfg)
    b, _ = lstm.sequence_forward(X, P, cfg)
    np.testing.assert_array_equal(a, b)
    c, _ = lstm.sequence_forward(X, P, cfg, mode="train", rng=np.random.default_rng(0))
    np.testing.assert_array_equal(a, c)  # p = 0
    np.testing.assert_allclose(a, P["fc.W"] @ fa + P["fc.b"], atol=1e-14)
    with pytest.raises(EmptySequence):
        lstm.sequence_forward(np.zeros((0, 6)), P, cfg)
    with pytest.raises(SequenceTooLong):
        lstm.sequence_forward(np.zeros((21, 6)), P, cfg)
    with pytest.raises(ShapeMismatch):
        lstm.sequence_forward(np.zeros((2, 4)), P, cfg)


def test_sequence_forward_equals_stepwise_cells():
    cfg = small_cfg()
    P = rand_params(cfg, 3)
    X = np.random.default_rng(4).normal(size=(4, 6))
    s1 = lstm.LstmState(np.zeros(5), np.zeros(5))
    s2 = lstm.LstmState(np.zeros(5), np.zeros(5))
    for x in X:
        s1 = lstm.cell_forward(x, s1, P, 1)
        s2 = lstm.cell_forward(s1.h, s2, P, 2)
    _, feat = lstm.sequence_forward(X, P, cfg)
    np.testing.assert_allclose(feat, s2.h, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 8))
def test_activation_bounds(seed, T):
    cfg = small_cfg()
    P = rand_params(cfg, seed, scale=3.0)
    X = np.random.default_rng(seed).normal(0, 3, size=(T, 6))
    s = lstm.LstmState(np.zeros(5), np.zeros(5))
    for x in X:
        s = lstm.cell_forward(x, s, P, 1)
        assert (np.abs(s.h) < 1).all()
        for gate in "ifo":
            assert ((s.cache[gate] >= 0) & (s.cache[gate] <= 1)).all()
        assert (np.abs(s.cache["g"]) <= 1).all()


def test_softmax_cross_entropy():
    loss, grad = lstm.softmax_cross_entropy(np.zeros(67), 5)
    assert loss == pytest.approx(math.log(67), abs=1e-12)
    assert grad[0] == pytest.approx(1 / 67)
    loss, grad = lstm.softmax_cross_entropy(np.array([1000.0, 0.0]), 0)
    assert 0 <= loss < 1e-12 and np.isfinite(grad).all()
    loss, grad = lstm.softmax_cross_entropy(np.random.default_rng(0).normal(size=9), 3)
    assert abs(grad.sum()) < 1e-15 and loss >= 0
    np.testing.assert_allclose(lstm.softmax(np.random.default_rng(1).normal(size=(4, 7))).sum(axis=1), 1.0,
                               atol=1e-12)


def test_zero_upstream_gives_zero_gradients():
    cfg = small_cfg()
    P = rand_params(cfg)
    X = np.random.default_rng(0).normal(size=(3, 4, 6))
    logits, _, cache = lstm.forward_group(X, P, cfg)
    g = lstm.backward_from_logits(np.zeros_like(logits), P, cfg, cache)
    for v in g.values():
        assert not v.any()
    with pytest.raises(MissingCache):
        lstm.backward_from_logits(np.zeros_like(logits), P, cfg, None)


def test_duplicate_sample_same_gradient():
    cfg = small_cfg()
    P = rand_params(cfg, 5)
    x = np.random.default_rng(6).normal(size=(3, 6))
    g1 = lstm.backward([x], [1], P, cfg)
    g2 = lstm.backward([x, x.copy()], [1, 1], P, cfg)
    for k in g1:
        np.testing.assert_allclose(g1[k], g2[k], rtol=1e-12, atol=1e-15)


def test_mixed_lengths_equal_per_sample_sum():
    cfg = small_cfg()
    P = rand_params(cfg, 7)
    rng = np.random.default_rng(8)
    seqs = [rng.normal(size=(t, 6)) for t in (1, 3, 3, 2)]
    labels = [0, 2, 1, 1]
    total = lstm.backward(seqs, labels, P, cfg)
    parts = [lstm.backward([s], [y], P, cfg) for s, y in zip(seqs, labels)]
    for k in total:
        np.testing.assert_allclose(total[k], sum(p[k] for p in parts) / 4, rtol=1e-10, atol=1e-14)


def _fd(P, name, f, eps=1e-5):
    g = np.zeros_like(P[name])
    for idx in np.ndindex(*P[name].shape):
        old = P[name][idx]
        P[name][idx] = old + eps
        up = f()
        P[name][idx] = old - eps
        down = f()
        P[name][idx] = old
        g[idx] = (up - down) / (2 * eps)
    return g


def test_dropout_gradient_with_fixed_mask():
    cfg = small_cfg(dropout=0.4)
    P = rand_params(cfg, 9)
    rng = np.random.default_rng(10)
    X = rng.normal(size=(2, 3, 6))
    mask = lstm.dropout_mask(np.random.default_rng(11), (2, 5), 0.4)
    y = np.array([0, 2])

    def loss():
        logits, _, _ = lstm.forward_group(X, P, cfg, mask)
        return float(-lstm.log_softmax(logits)[np.arange(2), y].mean())

    logits, _, cache = lstm.forward_group(X, P, cfg, mask)
    d = lstm.softmax(logits)
    d[np.arange(2), y] -= 1
    grads = lstm.backward_from_logits(d / 2, P, cfg, cache)
    for name in ("fc.W", "l2.U", "l1.W"):
        num = _fd(P, name, loss)
        np.testing.assert_allclose(grads[name], num, rtol=1e-5, atol=1e-9)


def test_gradcheck_instance_all_tensors():
    errs = check_lstm(3)
    assert len(errs) == 2 * 3 * 4 + 2
    assert max(errs.values()) < 1e-4


def test_inverted_dropout_expectation():
    feat = np.random.default_rng(0).uniform(0.2, 1.0, size=30)
    rng = np.random.default_rng(1)
    masks = lstm.dropout_mask(rng, (10_000, 30), 0.1)
    mean = (feat * masks).mean(axis=0)
    np.testing.assert_allclose(mean, feat, rtol=0.02)
    assert set(np.unique(masks)) == {0.0, 1 / 0.9}


def test_reversal_changes_logits():
    cfg = lstm.NetworkConfig(n_classes=4, hidden=8, dropout=0.0)
    P = rand_params(cfg, 12)
    X = random_chain(np.random.default_rng(13), 4)
    a, _ = lstm.sequence_forward(X, P, cfg)
    b, _ = lstm.sequence_forward(X[::-1], P, cfg)
    assert np.abs(a - b).max() > 1e-6


def test_init_params():
    cfg = lstm.NetworkConfig(n_classes=5)
    P = lstm.init_params(cfg, np.random.default_rng(0))
    assert P["l1.W"].shape == (120, 137) and P["l2.W"].shape == (120, 30) and P["fc.W"].shape == (5, 30)
    assert np.abs(P["l1.W"]).max() <= 1 / math.sqrt(137)
    np.testing.assert_array_equal(lstm.gate_view(P["l1.b"], "f", 30), 1.0)
    np.testing.assert_array_equal(lstm.gate_view(P["l2.b"], "i", 30), 0.0)
    assert not P["fc.b"].any()


def _toy(n=20, seed=0):
    rng = np.random.default_rng(seed)
    codes = [IcdCode("I", m, 1) for m in range(6)]
    seqs, labels = [], []
    for i in range(n):
        y = i % 2
        L = int(rng.integers(2, 5))
        toks = list(rng.choice(6, size=L))
        toks.sort(reverse=bool(y))  # order alone tells the classes apart
        seqs.append(encode_chain([codes[t] for t in toks]))
        labels.append(y)
    return seqs, labels


def test_train_deterministic_and_trace(tmp_path):
    seqs, labels = _toy(30, seed=1)
    cfg = lstm.NetworkConfig(n_classes=2, hidden=6, epochs=3, batch_size=8, seed=4)
    p1, t1 = lstm.train(seqs, labels, cfg, seqs[:10], labels[:10])
    p2, t2 = lstm.train(seqs, labels, cfg, seqs[:10], labels[:10])
    assert [s.line() for s in t1] == [s.line() for s in t2]
    for k in p1:
        np.testing.assert_array_equal(p1[k], p2[k])
    assert len(t1) == 3 and t1[0].line().split(",")[0] == "1"
    assert all(0 <= s.test_acc <= 1 for s in t1)


def test_divergence_detected():
    seqs, labels = _toy(8)
    cfg = lstm.NetworkConfig(n_classes=2, hidden=4, epochs=2)
    P = lstm.init_params(cfg)
    P["fc.W"][:] = np.nan
    with pytest.raises(DivergenceDetected) as exc:
        lstm.train(seqs, labels, cfg, params=P)
    assert exc.value.epoch == 1


def test_model_file_roundtrip(tmp_path):
    cfg = lstm.NetworkConfig(n_classes=3, hidden=7, seed=2)
    P = lstm.init_params(cfg, np.random.default_rng(3))
    P = {k: v + np.random.default_rng(4).normal(size=v.shape) for k, v in P.items()}
    path = tmp_path / "m.json"
    lstm.save_model(path, P, cfg, {"note": "x"})
    Q, cfg2, meta = lstm.load_model(path)
    assert cfg2 == cfg and meta == {"note": "x"}
    for k in P:
        np.testing.assert_array_equal(P[k], Q[k])
    seqs = [random_chain(np.random.default_rng(5), t) for t in (1, 3, 5)]
    np.testing.assert_array_equal(lstm.predict_logits(seqs, P, cfg), lstm.predict_logits(seqs, Q, cfg2))


def test_float32_training_runs():
    seqs, labels = _toy(12)
    cfg = lstm.NetworkConfig(n_classes=2, hidden=4, epochs=2, dtype="float32")
    P, trace = lstm.train(seqs, labels, cfg)
    assert P["l1.W"].dtype == np.float32 and np.isfinite(trace[-1].loss)
