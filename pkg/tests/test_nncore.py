import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnlab.nncore import (
    Adagrad,
    CheckpointError,
    ConfigurationError,
    DenseLayer,
    EmbeddingTable,
    GradientCheckError,
    GruCell,
    Mlp,
    Param,
    backward_check,
    bce_with_logits,
    gru_forward,
    load_checkpoint,
    log_loss,
    save_checkpoint,
    sigmoid,
)


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    assert sigmoid(1.0) == pytest.approx(0.7310586, abs=1e-6)
    assert sigmoid(-9.0) == pytest.approx(1.23395e-4, abs=1e-9)
    assert np.all(np.isfinite(sigmoid(np.array([-1e4, 1e4]))))


@given(st.floats(-30, 30))
def test_sigmoid_symmetry(x):
    assert abs(sigmoid(x) + sigmoid(-x) - 1.0) <= 1e-15


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_sigmoid_monotone(a, b):
    if a < b:
        assert sigmoid(a) <= sigmoid(b)


def test_log_loss_values():
    assert log_loss(0.5, 1) == pytest.approx(0.6931472, abs=1e-7)
    assert log_loss(1.0, 1) == pytest.approx(1e-7, rel=1e-3)
    assert log_loss(0.25, 0) == pytest.approx(-math.log(0.75), abs=1e-12)
    assert log_loss(0.25, 0) == pytest.approx(0.2876821, abs=1e-7)
    assert log_loss(0.0, 1) == pytest.approx(-math.log(1e-7))


def test_bce_with_logits_matches_log_loss():
    rng = np.random.default_rng(0)
    z = rng.normal(size=50)
    y = rng.integers(0, 2, 50)
    loss, grad = bce_with_logits(z, y)
    assert loss == pytest.approx(np.mean(log_loss(sigmoid(z), y)), abs=1e-12)
    assert np.allclose(grad, (sigmoid(z) - y) / 50)


def _scalar_gru_oracle(cell, xs, h0):
    H = cell.hidden_dim
    W, U, b = cell.W.value, cell.U.value, cell.b.value
    h = list(h0)
    out = []
    for x in xs:
        def pre(k, hv):
            return [sum(x[i] * W[i, k * H + j] for i in range(len(x)))
                    + sum(hv[i] * U[i, k * H + j] for i in range(H)) + b[k * H + j] for j in range(H)]
        z = [1 / (1 + math.exp(-v)) for v in pre(0, h)]
        r = [1 / (1 + math.exp(-v)) for v in pre(1, h)]
        rh = [r[i] * h[i] for i in range(H)]
        c = [math.tanh(sum(x[i] * W[i, 2 * H + j] for i in range(len(x)))
                       + sum(rh[i] * U[i, 2 * H + j] for i in range(H)) + b[2 * H + j]) for j in range(H)]
        h = [(1 - z[j]) * h[j] + z[j] * c[j] for j in range(H)]
        out.append(h)
    return np.array(out)


def test_gru_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    cell = GruCell("g", 3, 4, rng)
    cell.b.value[:] = rng.normal(scale=0.1, size=12)
    xs = rng.normal(size=(3, 3))
    h0 = rng.uniform(-0.5, 0.5, 4)
    got = np.array(gru_forward(cell, list(xs), h0))
    assert np.max(np.abs(got - _scalar_gru_oracle(cell, xs, h0))) < 1e-12


def test_gru_zero_weights_and_empty_input():
    cell = GruCell("g", 3, 4)
    hs = gru_forward(cell, [np.ones(3)] * 5, np.zeros(4))
    assert np.all(np.array(hs) == 0)
    assert gru_forward(cell, [], np.zeros(4)) == []


def test_gru_dimension_errors():
    cell = GruCell("g", 3, 4)
    with pytest.raises(ConfigurationError):
        gru_forward(cell, [np.ones(2)], np.zeros(4))
    with pytest.raises(ConfigurationError):
        gru_forward(cell, [np.ones(3)], np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_gru_outputs_stay_in_unit_interval(seed):
    rng = np.random.default_rng(seed)
    cell = GruCell("g", 2, 3, rng)
    h0 = rng.uniform(-0.99, 0.99, 3)
    hs = gru_forward(cell, list(rng.normal(size=(6, 2))), h0)
    assert np.all(np.abs(np.array(hs)) < 1)
    # saturated drive may round tanh to exactly +-1 but never beyond
    cell.W.value *= 50
    hs = gru_forward(cell, list(rng.normal(scale=3, size=(6, 2))), h0)
    assert np.all(np.abs(np.array(hs)) <= 1)


def test_masked_unroll_matches_unpadded():
    rng = np.random.default_rng(2)
    cell = GruCell("g", 2, 3, rng)
    x = rng.normal(size=(2, 5, 2))
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], float)
    hs, _ = cell.forward_seq(x, mask)
    alone, _ = cell.forward_seq(x[:1, :3])
    assert np.allclose(hs[0, -1], alone[0, -1], atol=1e-15)


def test_dense_sigmoid_gradcheck():
    rng = np.random.default_rng(3)
    layer = DenseLayer("d", 4, 3, "sigmoid", rng)
    x = rng.normal(size=(5, 4))
    w = rng.normal(size=(5, 3))

    def closure():
        for p in layer.params():
            p.zero_grad()
        a, cache = layer.forward(x)
        dx = layer.backward(w, cache)
        return float(np.sum(a * w)), {"weight": layer.weight.grad.copy(), "bias": layer.bias.grad.copy(),
                                      "x": dx}

    err = backward_check(closure, {"weight": layer.weight.value, "bias": layer.bias.value, "x": x})
    assert err < 1e-5


@pytest.mark.parametrize("activation", ["identity", "relu", "tanh"])
def test_dense_other_activations_gradcheck(activation):
    rng = np.random.default_rng(4)
    layer = DenseLayer("d", 3, 2, activation, rng)
    x = rng.normal(size=(4, 3))

    def closure():
        for p in layer.params():
            p.zero_grad()
        a, cache = layer.forward(x)
        layer.backward(2 * a, cache)
        return float(np.sum(a * a)), {"weight": layer.weight.grad.copy()}

    assert backward_check(closure, {"weight": layer.weight.value}) < 1e-5


def test_gru_two_step_gradcheck():
    rng = np.random.default_rng(5)
    cell = GruCell("g", 3, 4, rng)
    x = rng.normal(size=(2, 2, 3))
    h0 = rng.uniform(-0.5, 0.5, (2, 4))
    w = rng.normal(size=(2, 2, 4))

    def closure():
        for p in cell.params():
            p.zero_grad()
        hs, cache = cell.forward_seq(x, None, h0)
        dx, dh0 = cell.backward_seq(w, cache)
        grads = {p.name: p.grad.copy() for p in cell.params()}
        grads.update(x=dx, h0=dh0)
        return float(np.sum(hs * w)), grads

    arrays = {p.name: p.value for p in cell.params()}
    arrays.update(x=x, h0=h0)
    assert backward_check(closure, arrays) < 1e-4


def test_embedding_dot_gradcheck():
    rng = np.random.default_rng(6)
    table = EmbeddingTable("e", 6, 4, rng)
    ids = np.array([1, 3, 3, 5])
    v = rng.normal(size=4)

    def closure():
        table.zero_grad()
        e = table.lookup(ids)
        table.accumulate(ids, np.broadcast_to(v, e.shape))
        return float(np.sum(e @ v)), {"e": table.dense_grad()}

    assert backward_check(closure, {"e": table.values}) < 1e-6


def test_backward_check_rejects_non_finite_and_float32():
    a = np.ones(2)
    with pytest.raises(GradientCheckError):
        backward_check(lambda: (0.0, {"a": np.array([np.nan, 0.0])}), {"a": a})
    with pytest.raises(GradientCheckError):
        backward_check(lambda: (0.0, {"a": np.zeros(2, np.float32)}), {"a": np.ones(2, np.float32)})


def test_embedding_table_invariants():
    rng = np.random.default_rng(0)
    t = EmbeddingTable("e", 10, 8, rng)
    assert t.values.shape == t.grad_accum.shape
    assert np.all(np.abs(t.values) <= 0.05 / np.sqrt(8))
    assert t.lookup(np.arange(10)).shape == (10, 8)
    with pytest.raises(IndexError):
        t.lookup([10])
    t.accumulate([2, 2, 4], np.ones((3, 8)))
    ids, rows = t.sparse_grad()
    assert ids.tolist() == [2, 4]
    assert rows[0].tolist() == [2.0] * 8


def test_adagrad_zero_grad_leaves_params():
    p = Param("p", np.arange(3.0))
    Adagrad(0.01).step([p])
    assert p.value.tolist() == [0.0, 1.0, 2.0]


def test_adagrad_first_step_and_shrinking():
    p = Param("p", np.array(1.0))
    opt = Adagrad(0.01, epsilon=1e-12)
    p.grad[...] = 3.0
    opt.step([p])
    first = 1.0 - float(p.value)
    assert first == pytest.approx(0.01, rel=1e-9)
    before = float(p.value)
    p.grad[...] = 3.0
    opt.step([p])
    assert 0 < before - float(p.value) < first


@given(st.floats(0.01, 10), st.integers(2, 8))
def test_adagrad_steps_non_increasing(g, n):
    p = Param("p", np.zeros(1))
    opt = Adagrad(0.1)
    steps, accum = [], []
    for _ in range(n):
        before = p.value.copy()
        p.grad[:] = g
        opt.step([p])
        steps.append(float(before[0] - p.value[0]))
        accum.append(float(p.grad_accum[0]))
    assert all(a >= b - 1e-15 for a, b in zip(steps, steps[1:]))
    assert all(a <= b for a, b in zip(accum, accum[1:]))
    assert max(steps) <= 0.1 / np.sqrt(opt.epsilon)


def test_adagrad_sparse_rows_only():
    t = EmbeddingTable("e", 5, 2, np.random.default_rng(0))
    before = t.values.copy()
    t.accumulate([1, 3], np.ones((2, 2)))
    Adagrad(0.1).step([], [t])
    changed = np.any(t.values != before, axis=1)
    assert changed.tolist() == [False, True, False, True, False]
    assert np.all(t.grad_accum[[0, 2, 4]] == 0)


def test_adagrad_clip_norm():
    p = Param("p", np.zeros(2))
    p.grad[:] = [30.0, 40.0]
    norm = Adagrad(0.1, clip_norm=1.0).step([p])
    assert norm == pytest.approx(50.0)
    assert np.allclose(p.grad_accum, [0.36, 0.64])


def test_toy_training_separable():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(200, 2))
    y = (x[:, 0] + 2 * x[:, 1] > 0).astype(float)
    mlp = Mlp("m", 2, [], rng)
    opt = Adagrad(0.5)
    for _ in range(2000):
        logits, cache = mlp.forward(x)
        loss, d = bce_with_logits(logits, y)
        mlp.backward(d, cache)
        opt.step(mlp.params())
    logits, _ = mlp.forward(x)
    assert bce_with_logits(logits, y)[0] < 0.05


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.arange(4, dtype=np.int64)}
    path = save_checkpoint(tmp_path / "m.ckpt", tensors, {"seed": 1, "step": 7})
    got, meta = load_checkpoint(path)
    assert meta == {"seed": 1, "step": 7}
    for k, v in tensors.items():
        assert got[k].dtype == v.dtype and got[k].shape == v.shape
        assert got[k].tobytes() == v.tobytes()
    header = path.read_bytes().split(b"\nend\n")[0].decode()
    assert header.splitlines()[0] == "SRNCKPT 1"
    assert "tensor b <f8 - " in header


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "x.ckpt", {"a b": np.zeros(1)})


@pytest.mark.parametrize("mask", [
    np.array([[1, 1, 1, 0], [1, 0, 0, 0], [1, 1, 1, 1], [0, 0, 0, 0]], float),
    np.array([[1, 0, 1, 1], [0, 1, 0, 1], [1, 1, 0, 0], [1, 1, 1, 1]], float),
], ids=["right_padded", "scattered"])
def test_gru_masked_gradcheck(mask):
    rng = np.random.default_rng(7)
    cell = GruCell("g", 2, 3, rng)
    x = rng.normal(size=(4, 4, 2))
    w = rng.normal(size=(4, 3))

    def closure():
        for p in cell.params():
            p.zero_grad()
        hs, cache = cell.forward_seq(x, mask)
        dx, _ = cell.backward_last(w, cache)
        grads = {p.name: p.grad.copy() for p in cell.params()}
        grads["x"] = dx
        return float(np.sum(hs[:, -1] * w)), grads

    arrays = {p.name: p.value for p in cell.params()}
    arrays["x"] = x
    assert backward_check(closure, arrays) < 1e-4


def test_gru_padded_rows_keep_h0():
    rng = np.random.default_rng(8)
    cell = GruCell("g", 2, 3, rng)
    h0 = rng.uniform(-0.5, 0.5, (3, 3))
    mask = np.array([[1, 1], [0, 0], [1, 0]], float)
    hs, _ = cell.forward_seq(rng.normal(size=(3, 2, 2)), mask, h0)
    assert np.array_equal(hs[1, -1], h0[1])
    assert np.array_equal(hs[2, 1], hs[2, 0])
