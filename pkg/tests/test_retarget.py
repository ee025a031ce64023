import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srnlab.nncore import ConfigurationError, GruCell, backward_check
from srnlab.retarget import (
    RIPPLE_ROWS,
    RetargetOutput,
    SimilarityGateParams,
    SimilaritySequence,
    SrnLayer,
    SrnOptions,
    cosine_similarity,
    gate_forward,
    hrn_aggregate,
    hrn_bins,
    hrn_counts,
    hrn_similarity,
    normalize_rows,
    retarget_evolution,
    ripple_ids,
    ripple_index,
    similarity_gate,
    srn_forward,
    weight_aggregation,
)


def _sig(x):
    return 1.0 / (1.0 + math.exp(-x))


def _gate_oracle(c, w, b):
    return _sig(w * c - b) / _sig(w - b)


# ---------------------------------------------------------------- hard retargeting

def test_hrn_similarity_examples():
    assert hrn_similarity(1, [1, 2, 1]).weights.tolist() == [1, 0, 1]
    assert hrn_similarity(4, [1, 2, 3]).weights.tolist() == [0, 0, 0]


def test_hrn_aggregate_examples():
    assert hrn_aggregate([1, 0, 1]) == (2.0, "3", 1.0)
    assert hrn_aggregate([1.0] * 5)[1] == "6"
    assert hrn_aggregate([]) == (0.0, "1", 0.0)
    assert hrn_aggregate([1.0] * 9, cap=4)[1] == "4"


def test_hrn_matches_naive_oracle_10k():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        n = int(rng.integers(0, 51))
        seq = rng.integers(1, 12, n).tolist()
        target = int(rng.integers(1, 12))
        w = hrn_similarity(target, seq).weights
        naive = [1.0 if s == target else 0.0 for s in seq]
        assert w.tolist() == naive
        count = sum(naive)
        n_s, fid, s_max = hrn_aggregate(w)
        assert n_s == count and fid == str(int(count) + 1)
        assert s_max == (max(naive) if naive else 0.0)


def test_hrn_batched_matches_scalar():
    rng = np.random.default_rng(1)
    seq = rng.integers(0, 6, (200, 15))
    lengths = rng.integers(0, 16, 200)
    mask = np.arange(15)[None, :] < lengths[:, None]
    seq = np.where(mask, np.maximum(seq, 1), 0)
    target = rng.integers(1, 6, 200)
    counts = hrn_counts(target, seq, mask)
    for i in range(200):
        n_s, fid, _ = hrn_aggregate(hrn_similarity(target[i], seq[i, :lengths[i]]).weights, cap=8)
        assert counts[i] == n_s
        assert hrn_bins(counts[i:i + 1], 8)[0] == int(fid)


# ---------------------------------------------------------------- cosine and gate

def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.5])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-15)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert cosine_similarity([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert cosine_similarity([0, 0], [1, 1]) == 0.0
    np.testing.assert_array_equal(normalize_rows(np.zeros((2, 3))), 0.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_cosine_bounded(a, b):
    assert -1.0 <= cosine_similarity(a, b) <= 1.0


def test_gate_values():
    p = SimilarityGateParams("g", 10.0, 9.0)
    assert similarity_gate(1.0, p) == 1.0
    assert similarity_gate(0.9, p) == pytest.approx(0.6839397, abs=1e-6)
    assert similarity_gate(0.9, p) == pytest.approx(_gate_oracle(0.9, 10, 9), abs=1e-15)
    assert similarity_gate(0.0, p) == pytest.approx(1.688e-4, abs=1e-7)
    # sigma(0.5) / sigma(1)
    assert similarity_gate(0.95, p) == pytest.approx(0.851449, abs=1e-6)
    assert similarity_gate(0.95, p) == pytest.approx(_gate_oracle(0.95, 10, 9), abs=1e-15)


def test_gate_normalization_random_params():
    rng = np.random.default_rng(3)
    for w, b in rng.uniform(1e-3, 50, (100, 2)):
        assert abs(gate_forward(1.0, w, b)[0] - 1.0) <= 1e-15


@settings(max_examples=100, deadline=None)
@given(st.floats(1e-2, 50), st.floats(1e-2, 50))
def test_gate_normalization_property(w, b):
    assert abs(gate_forward(1.0, w, b)[0] - 1.0) <= 1e-15


def test_gate_strictly_increasing():
    grid = np.linspace(-1, 1, 2001)
    f = gate_forward(grid, 10.0, 9.0)[0]
    assert np.all(np.diff(f) > 0)
    assert np.all((f > 0) & (f <= 1.0))


def test_gate_suppresses_low_cosines():
    # below 0.01 up to c = (9 + logit(0.01 * sigmoid(1))) / 10, about 0.409
    edge = (9 + math.log(0.01 * _sig(1) / (1 - 0.01 * _sig(1)))) / 10
    assert 0.40 < edge < 0.41
    grid = np.linspace(-1, edge - 1e-9, 1401)
    assert np.all(gate_forward(grid, 10.0, 9.0)[0] < 0.01)
    assert gate_forward(0.7, 10.0, 9.0)[0] == pytest.approx(_sig(-2) / _sig(1), abs=1e-15)


def test_gate_derivatives():
    c = np.linspace(-0.95, 0.95, 11)
    h = 1e-6
    w, b = 7.0, 5.5
    _, dc, dw, db = gate_forward(c, w, b)
    f = lambda c_, w_, b_: np.array([_gate_oracle(x, w_, b_) for x in np.atleast_1d(c_)])
    np.testing.assert_allclose(dc, (f(c + h, w, b) - f(c - h, w, b)) / (2 * h), rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(dw, (f(c, w + h, b) - f(c, w - h, b)) / (2 * h), rtol=1e-6, atol=1e-10)
    np.testing.assert_allclose(db, (f(c, w, b + h) - f(c, w, b - h)) / (2 * h), rtol=1e-6, atol=1e-10)


def test_gate_crossing():
    p = SimilarityGateParams("g", 10.0, 9.0)
    x = p.crossing(0.5)
    assert similarity_gate(x, p) == pytest.approx(0.5, abs=1e-12)
    assert 0.84 < x < 0.85


def test_gate_rejects_nonpositive():
    with pytest.raises(ConfigurationError):
        SimilarityGateParams("g", -1.0, 2.0)


# ---------------------------------------------------------------- ripple bins

def test_ripple_ids():
    assert ripple_ids([0.987, 1.0, -1.0]) == ["99", "101", "-99"]
    idx = ripple_index([-1.0, 1.0, 0.0])
    assert idx.tolist() == [0, RIPPLE_ROWS - 1, 100]


@settings(max_examples=200, deadline=None)
@given(st.floats(-1, 1))
def test_ripple_index_in_range(c):
    i = int(ripple_index([c])[0])
    assert 0 <= i < RIPPLE_ROWS
    assert int(ripple_ids([c])[0]) == math.floor(c / 0.01) + 1


# ---------------------------------------------------------------- aggregation

def test_weight_aggregation_examples():
    np.testing.assert_array_equal(weight_aggregation([0, 0], [[1, 2], [3, 4]]), [0, 0])
    np.testing.assert_allclose(weight_aggregation([1.0, 0.5], [[1, 0], [0, 2]]), [1.0, 1.0])


def test_weight_aggregation_gate_gradient():
    rng = np.random.default_rng(5)
    cos = np.array([0.915, 0.955, 0.605, 0.985])
    e = rng.normal(size=(4, 3))
    r = rng.normal(size=3)
    p = SimilarityGateParams("g", 10.0, 9.0)
    logs = {"log_w": p.log_w.value, "log_b": p.log_b.value}

    def loss_and_grads():
        f, _, dw, db = gate_forward(cos, p.w, p.b)
        loss = float(weight_aggregation(f, e) @ r)
        g = e @ r
        return loss, {"log_w": np.array(g @ dw * p.w), "log_b": np.array(g @ db * p.b)}

    assert backward_check(loss_and_grads, logs) < 1e-5


def test_evolution_order_sensitive():
    rng = np.random.default_rng(7)
    layer = SrnLayer("item", 4, 3, (10, 9), rng)
    cos = np.array([0.1, 0.5, 0.9])
    table = layer.ripple.values
    e1 = table[ripple_index(cos)]
    e2 = table[ripple_index(cos[::-1])]
    g1 = retarget_evolution(e1, layer.cell)
    g2 = retarget_evolution(e2, layer.cell)
    assert np.linalg.norm(g1 - g2) > 0
    w = gate_forward(cos, 10.0, 9.0)[0]
    np.testing.assert_allclose(weight_aggregation(w, e1), weight_aggregation(w[::-1], e2), atol=1e-15)
    assert np.all(retarget_evolution(np.zeros((0, 4)), layer.cell) == 0)


def test_evolution_single_step():
    cell = GruCell("c", 2, 3, np.random.default_rng(2))
    x = np.array([0.3, -0.7])
    h1 = cell.step(np.zeros((1, 3)), x[None])
    np.testing.assert_allclose(retarget_evolution(x[None], cell), h1[0], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_aggregation_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    layer = SrnLayer("item", 4, 3, (10, 9), rng)
    cos = rng.uniform(-1, 1, (1, n))
    perm = rng.permutation(n)
    m = np.ones((1, n), bool)
    a = layer.forward(cos, m)[0]
    b = layer.forward(cos[:, perm], m)[0]
    np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- soft retargeting

def test_srn_forward_target_in_sequence():
    rng = np.random.default_rng(0)
    layer = SrnLayer("item", 4, 3, (10, 9), rng)
    tv = np.array([1.0, 0.0])
    sv = np.array([[0.0, 1.0], [0.2, 0.1], [-1.0, 0.3]])
    out = srn_forward({"item": tv}, {"item": sv}, {"item": layer},
                      target_ids={"item": 7}, sequence_ids={"item": np.array([3, 7, 5])})["item"]
    assert isinstance(out, RetargetOutput)
    assert out.similarity.cosines[1] == 1.0 and out.similarity.weights[1] == 1.0
    assert out.s_max == 1.0
    assert out.I_SRN.shape == (7,)
    assert len(out.similarity) == 3


def test_srn_forward_empty_sequence():
    layer = SrnLayer("item", 4, 3, (10, 9), np.random.default_rng(0))
    out = srn_forward({"item": np.ones(2)}, {"item": np.zeros((0, 2))}, {"item": layer})["item"]
    assert out.s_max == 0.0 and out.n_s == 0.0 and out.hrn_feature_id == "1"
    assert np.all(out.I_S == 0) and np.all(out.G_S == 0)


def test_constant_gate_uniform_embedding():
    layer = SrnLayer("item", 3, 2, (10, 9), None, SrnOptions(gate_mode="constant_one", use_gru=False))
    e = np.array([0.5, -1.0, 2.0])
    layer.ripple.values[:] = e
    cos = np.random.default_rng(1).uniform(-1, 1, (1, 6))
    I, _, G, _ = layer.forward(cos, np.ones((1, 6), bool))
    np.testing.assert_allclose(I[0], 6 * e, atol=1e-15)
    assert G is None


def test_padding_ignored():
    layer = SrnLayer("item", 3, 2, (10, 9), np.random.default_rng(4))
    cos = np.array([[0.95, 0.99, 0.2]])
    full = layer.forward(cos[:, :2], np.ones((1, 2), bool))
    padded = layer.forward(cos, np.array([[True, True, False]]))
    np.testing.assert_allclose(full[0], padded[0], atol=1e-15)
    np.testing.assert_allclose(full[2], padded[2], atol=1e-15)


def test_one_hot_embeddings_hrn_srn_consistency():
    rng = np.random.default_rng(11)
    eye = np.eye(30)
    layer = SrnLayer("item", 4, 3, (10, 9), rng)
    for _ in range(1000):
        n = int(rng.integers(0, 12))
        seq = rng.integers(1, 30, n)
        target = int(rng.integers(1, 30))
        out = srn_forward({"item": eye[target]}, {"item": eye[seq]}, {"item": layer})["item"]
        hit = (seq == target).astype(float)
        np.testing.assert_array_equal(out.similarity.cosines, hit)
        hrn_max = hrn_aggregate(hrn_similarity(target, seq).weights)[2]
        if hrn_max == 1.0:
            assert out.s_max == 1.0
        else:
            # orthogonal vectors leave only the gate floor F(0)
            assert out.s_max <= 2e-4
        assert (out.s_max > 0.5) == (hrn_max > 0.5)


def test_similarity_sequence_lengths():
    with pytest.raises(ValueError):
        SimilaritySequence(np.zeros(2), np.zeros(3), ["1", "1"])


def test_options_validation():
    with pytest.raises(ConfigurationError):
        SrnLayer("x", 2, 2, (10, 9), None, SrnOptions(gate_mode="fixed"))
    with pytest.raises(ConfigurationError):
        SrnLayer("x", 2, 2, (10, 9), None, SrnOptions(aggregation="mean"))


def _layer_check(options, seed=0):
    rng = np.random.default_rng(seed)
    layer = SrnLayer("item", 3, 2, (6.0, 4.5), rng, options)
    # cosines kept away from ripple edges so bins stay fixed under perturbation
    cos = (np.floor(rng.uniform(-1, 1, (4, 5)) * 100) + 0.5) / 100
    cos[0, :2] = [0.955, 0.985]
    mask = np.arange(5)[None, :] < np.array([5, 3, 1, 0])[:, None]
    rI = rng.normal(size=(4, layer.dim))
    rG = rng.normal(size=(4, layer.hidden))
    ps = layer.all_params() if options.gate_mode == "learned" else layer.params()
    ps = [p for p in ps if p in layer.params()]
    params = {p.name: p.value for p in ps}
    params.update({t.name: t.values for t in layer.tables()})
    params["cos"] = cos

    def loss_and_grads():
        for p in layer.all_params():
            p.zero_grad()
        for t in layer.tables():
            t.zero_grad()
        I, cache, G, _ = layer.forward(cos, mask)
        loss = float(np.sum(I * rI)) + (float(np.sum(G * rG)) if G is not None else 0.0)
        dcos = layer.backward(rI, rG if G is not None else None, cache)
        grads = {p.name: p.grad.copy() for p in ps}
        grads.update({t.name: t.dense_grad() for t in layer.tables()})
        grads["cos"] = dcos
        return loss, grads

    return backward_check(loss_and_grads, params)


@pytest.mark.parametrize("options", [
    SrnOptions(),
    SrnOptions(use_gru=False),
    SrnOptions(gate_mode="constant_one"),
    SrnOptions(aggregation="sum_binning", bin_cap=6),
])
def test_srn_layer_gradients(options):
    assert _layer_check(options) < 1e-4
