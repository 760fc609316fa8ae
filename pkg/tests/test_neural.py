import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oucal.errors import CacheMismatch, DimensionMismatch, EmptyDataset
from oucal.neural import (
    AdamState,
    LossConfig,
    LstmModel,
    TrainConfig,
    adam_step,
    composite_loss,
    composite_loss_grad,
    elu,
    huber_loss,
    infer,
    load_model,
    lstm_backward,
    lstm_forward,
    save_model,
    split_indices,
    train,
)
from oucal.ou_core import GridSpec, OUParams, SimConfig, simulate_batch

REGIMES = [OUParams(2.0, 1.0), OUParams(0.2, 1.0), OUParams(0.5, 4.0), OUParams(0.5, 0.25)]


def small_dataset(count=4, n=12, seed=3):
    return simulate_batch(REGIMES, GridSpec(0.01, n), SimConfig(seed=seed), count)


# ---------------------------------------------------------------- loss and activation


@pytest.mark.parametrize("r,expected", [(0.5, 0.125), (-0.5, 0.125), (2.0, 1.5), (-2.0, 1.5), (0.0, 0.0)])
def test_huber_values(r, expected):
    assert huber_loss(r, 1.0) == expected


@given(st.floats(0.05, 5.0))
def test_huber_continuous_at_delta(delta):
    eps = 1e-9 * delta
    assert huber_loss(delta - eps, delta) == pytest.approx(huber_loss(delta + eps, delta), abs=3 * delta * eps)
    assert huber_loss(delta, delta) == pytest.approx(0.5 * delta * delta)


def test_composite_loss_value():
    # residuals (2, 1): huber 1.5 and 0.5, weighted 1 * 1.5 + 0.5 * 0.5 ... on (2, 2): 1.5 + 0.75
    assert composite_loss([2.0, 2.0], [0.0, 0.0]) == pytest.approx(2.25)
    assert composite_loss([[1.0, 1.0], [1.0, 1.0]], [[1.0, 1.0], [1.0, 1.0]]) == 0.0


def test_composite_grad_matches_differences():
    rng = np.random.default_rng(0)
    pred, tgt = rng.normal(size=(5, 2)) * 2, rng.normal(size=(5, 2))
    g = composite_loss_grad(pred, tgt)
    h = 1e-6
    for idx in np.ndindex(pred.shape):
        up, dn = pred.copy(), pred.copy()
        up[idx] += h
        dn[idx] -= h
        fd = (composite_loss(up, tgt) - composite_loss(dn, tgt)) / (2 * h)
        assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_elu_values():
    assert elu(2.0) == 2.0
    assert elu(0.0) == 0.0
    assert elu(-30.0) == pytest.approx(-1.0 + math.exp(-30.0), abs=1e-16)
    assert elu(-30.0, alpha=2.0) > -2.0


# ---------------------------------------------------------------- forward pass


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def scalar_reference(model, path):
    """Unvectorized forward pass, one unit at a time."""
    H = model.hidden_size
    inp = [[float(v)] for v in path]
    for layer in model.layers:
        h, c, out = [0.0] * H, [0.0] * H, []
        for x in inp:
            pre = [sum(layer.W_ih[r, k] * x[k] for k in range(len(x)))
                   + sum(layer.W_hh[r, k] * h[k] for k in range(H)) + layer.b_ih[r] + layer.b_hh[r]
                   for r in range(4 * H)]
            i = [sigmoid(pre[u]) for u in range(H)]
            f = [sigmoid(pre[H + u]) for u in range(H)]
            g = [math.tanh(pre[2 * H + u]) for u in range(H)]
            o = [sigmoid(pre[3 * H + u]) for u in range(H)]
            c = [f[u] * c[u] + i[u] * g[u] for u in range(H)]
            h = [o[u] * math.tanh(c[u]) for u in range(H)]
            out.append(h)
        inp = out
    act = [v if v > 0 else model.elu_alpha * math.expm1(v) for v in inp[-1]]
    return [sum(model.head_W[j, u] * act[u] for u in range(H)) + model.head_b[j] for j in range(2)]


def test_forward_matches_scalar_transcription():
    model = LstmModel.init(3, seed=4)
    path = np.random.default_rng(1).normal(size=7)
    pred, _ = lstm_forward(model, path)
    np.testing.assert_allclose(pred[0], scalar_reference(model, path), atol=1e-12)


def test_zero_weights_output_is_head_bias():
    model = LstmModel.init(4, seed=0)
    for _, a in model.parameters():
        a[...] = 0.0
    model.head_b[:] = [0.3, -1.2]
    pred, _ = lstm_forward(model, np.random.default_rng(0).normal(size=(3, 9)))
    np.testing.assert_array_equal(pred, np.tile([0.3, -1.2], (3, 1)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(1.0, 1e3))
def test_hidden_state_bounded(seed, amp):
    model = LstmModel.init(5, seed=seed)
    for _, a in model.parameters():
        a *= amp
    x = np.random.default_rng(seed).normal(size=(2, 15)) * amp
    _, cache = lstm_forward(model, x)
    for h in cache.h:
        assert np.all(np.abs(h) <= 1.0)


def test_forward_rejects_bad_shape():
    with pytest.raises(DimensionMismatch):
        lstm_forward(LstmModel.init(2), np.zeros((2, 3, 4)))


# ---------------------------------------------------------------- backward pass


def test_bptt_matches_finite_differences():
    model = LstmModel.init(4, seed=2)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(2, 5))
    tgt = rng.normal(size=(2, 2))
    loss = LossConfig()
    pred, cache = lstm_forward(model, x)
    grads = lstm_backward(model, cache, composite_loss_grad(pred, tgt, loss))
    h = 1e-6
    for (name, arr), g in zip(model.parameters(), grads):
        assert g.shape == arr.shape, name
        fd = np.empty_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            fp = composite_loss(lstm_forward(model, x)[0], tgt, loss)
            arr[idx] = old - h
            fm = composite_loss(lstm_forward(model, x)[0], tgt, loss)
            arr[idx] = old
            fd[idx] = (fp - fm) / (2 * h)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9, err_msg=name)


def test_zero_upstream_gradient():
    model = LstmModel.init(3, seed=1)
    _, cache = lstm_forward(model, np.ones((2, 6)))
    for g in lstm_backward(model, cache, np.zeros((2, 2))):
        assert not np.any(g)


def test_gradient_additive_over_duplicated_batch():
    model = LstmModel.init(3, seed=1)
    x = np.random.default_rng(2).normal(size=(1, 6))
    d = np.array([[0.4, -0.7]])
    _, c1 = lstm_forward(model, x)
    one = lstm_backward(model, c1, d)
    _, c2 = lstm_forward(model, np.vstack([x, x]))
    two = lstm_backward(model, c2, np.vstack([d, d]))
    for a, b in zip(one, two):
        np.testing.assert_allclose(b, 2 * a, rtol=1e-12, atol=1e-15)


def test_cache_mismatch():
    model = LstmModel.init(3)
    _, cache = lstm_forward(model, np.ones((2, 4)))
    with pytest.raises(CacheMismatch):
        lstm_backward(model, cache, np.zeros((3, 2)))
    with pytest.raises(CacheMismatch):
        lstm_backward(LstmModel.init(5), cache, np.zeros((2, 2)))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_is_no_op():
    p = [np.array([1.0, -2.0])]
    st_ = AdamState.zeros_like(p)
    adam_step(p, [np.zeros(2)], st_, 1)
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


@pytest.mark.parametrize("g", [0.003, 1.0, -250.0])
def test_adam_constant_gradient_step_is_learning_rate(g):
    p = [np.zeros(1)]
    st_ = AdamState.zeros_like(p)
    cfg = TrainConfig(learning_rate=1e-3)
    prev = 0.0
    for t in range(1, 201):
        adam_step(p, [np.array([g])], st_, t, cfg)
        step = prev - p[0][0]
        prev = p[0][0]
    assert step == pytest.approx(math.copysign(1e-3, g), rel=1e-4)


def test_adam_deterministic():
    runs = []
    for _ in range(2):
        p = [np.ones(3)]
        s = AdamState.zeros_like(p)
        for t in range(1, 6):
            adam_step(p, [np.sin(p[0] * t)], s, t)
        runs.append(p[0])
    np.testing.assert_array_equal(*runs)


def test_adam_step_count_starts_at_one():
    with pytest.raises(ValueError):
        adam_step([np.zeros(1)], [np.zeros(1)], AdamState.zeros_like([np.zeros(1)]), 0)


# ---------------------------------------------------------------- training


def test_split_sizes():
    tr, va = split_indices(20_000, 0.8, seed=0)
    assert (len(tr), len(va)) == (16_000, 4_000)
    assert len(np.intersect1d(tr, va)) == 0
    a, _ = split_indices(100, 0.8, seed=1)
    b, _ = split_indices(100, 0.8, seed=1)
    np.testing.assert_array_equal(a, b)


def test_zero_learning_rate_gives_flat_curve():
    _, hist = train(small_dataset(), TrainConfig(epochs=3, hidden_size=3, learning_rate=0.0, batch_size=4))
    assert hist.train_loss[0] == pytest.approx(hist.train_loss[1], rel=1e-12)
    assert hist.val_loss[0] == hist.val_loss[2]


def test_training_reduces_loss_on_tiny_problem():
    _, hist = train(small_dataset(count=8), TrainConfig(epochs=30, hidden_size=4, learning_rate=0.02, batch_size=8))
    assert hist.train_loss[-1] < hist.train_loss[0]
    assert len(hist.rows()) == 30


def test_training_is_seeded():
    cfg = TrainConfig(epochs=2, hidden_size=3, batch_size=4)
    m1, h1 = train(small_dataset(), cfg)
    m2, h2 = train(small_dataset(), cfg)
    assert h1.train_loss == h2.train_loss
    for (_, a), (_, b) in zip(m1.parameters(), m2.parameters()):
        np.testing.assert_array_equal(a, b)


def test_normalizer_fitted_on_training_split():
    data = small_dataset()
    model, hist = train(data, TrainConfig(epochs=0, hidden_size=2))
    tr, _ = split_indices(len(data), 0.8, 0)
    xs = np.stack([data[i][0].x for i in tr])
    assert model.norm_shift == pytest.approx(xs.mean())
    assert model.norm_scale == pytest.approx(xs.std())
    assert hist.n_train == len(tr)


def test_train_errors():
    with pytest.raises(EmptyDataset):
        train([], TrainConfig(epochs=1))
    mixed = small_dataset(n=12)[:2] + small_dataset(n=13)[:2]
    with pytest.raises(DimensionMismatch):
        train(mixed, TrainConfig(epochs=1))


# ---------------------------------------------------------------- inference and persistence


@pytest.fixture(scope="module")
def tiny_model():
    model, _ = train(small_dataset(), TrainConfig(epochs=2, hidden_size=3, batch_size=4))
    return model


def test_infer_pure_and_batch_independent(tiny_model):
    trajs = [t for t, _ in small_dataset(seed=9)]
    a = infer(tiny_model, trajs)
    b = infer(tiny_model, trajs)
    np.testing.assert_array_equal(a, b)
    single = infer(tiny_model, trajs[5:6])
    np.testing.assert_allclose(single[0], a[5], rtol=1e-13)


def test_infer_length_mismatch(tiny_model):
    with pytest.raises(DimensionMismatch):
        infer(tiny_model, [np.zeros(40)])


@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=20))
def test_normalizer_round_trip(values):
    model = LstmModel(LstmModel.init(2).layers, np.zeros((2, 2)), np.zeros(2), norm_shift=3.7, norm_scale=12.5)
    x = np.array(values)
    np.testing.assert_allclose(model.denormalize(model.normalize(x)), x, rtol=1e-12, atol=1e-12)


def test_model_file_round_trip(tiny_model, tmp_path):
    p = tmp_path / "m.bin"
    save_model(tiny_model, p)
    back = load_model(p)
    for (n1, a), (n2, b) in zip(tiny_model.parameters(), back.parameters()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    assert (back.norm_shift, back.norm_scale, back.seq_len) == (tiny_model.norm_shift, tiny_model.norm_scale, 13)
    trajs = [t for t, _ in small_dataset(seed=2)]
    np.testing.assert_array_equal(infer(back, trajs), infer(tiny_model, trajs))


def test_model_file_validation(tiny_model, tmp_path):
    p = tmp_path / "m.bin"
    save_model(tiny_model, p)
    raw = bytearray(p.read_bytes())
    bad_magic = tmp_path / "bad.bin"
    bad_magic.write_bytes(b"NOTMODEL" + bytes(raw[8:]))
    with pytest.raises(ValueError):
        load_model(bad_magic)
    # hidden size field says 4 while tensors are 3 wide
    raw[12:16] = (4).to_bytes(4, "little")
    wrong = tmp_path / "wrong.bin"
    wrong.write_bytes(bytes(raw))
    with pytest.raises(DimensionMismatch):
        load_model(wrong)
