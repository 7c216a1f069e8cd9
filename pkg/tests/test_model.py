import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from patchforge.dataset import LabeledDataset
from patchforge.errors import ContractViolationError, CorruptInputError, TrainingFailureError
from patchforge.model import (
    Center, Conv2D, Dense, Flatten, MaxPool2, Model, ReLU, build_model, cross_entropy, load_model, save_model,
    softmax, train,
)

NAMES = ["mug", "box", "cone", "sphere", "can"]


def fd_layer(layer, x, w, h=1e-6):
    """Central differences of sum(w * layer(x)) with respect to x."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (np.sum(w * layer.forward(xp)[0]) - np.sum(w * layer.forward(xm)[0])) / (2 * h)
    return g


def fd_param(layer, x, w, key, h=1e-6):
    p = layer.params[key]
    g = np.zeros_like(p)
    for idx in np.ndindex(p.shape):
        old = p[idx]
        p[idx] = old + h
        up = np.sum(w * layer.forward(x)[0])
        p[idx] = old - h
        dn = np.sum(w * layer.forward(x)[0])
        p[idx] = old
        g[idx] = (up - dn) / (2 * h)
    return g


def max_rel(a, b, floor=1e-3):
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), floor)))


def test_conv_gradients_match_central_differences(rng):
    layer = Conv2D.init(rng, 2, 3)
    layer.params["b"] = rng.normal(size=3)
    x = rng.normal(size=(2, 6, 6, 2))
    out, cache = layer.forward(x)
    w = rng.normal(size=out.shape)
    dx, grads = layer.backward(w, cache)
    assert max_rel(dx, fd_layer(layer, x, w)) <= 1e-6
    assert max_rel(grads["W"], fd_param(layer, x, w, "W")) <= 1e-6
    assert max_rel(grads["b"], fd_param(layer, x, w, "b")) <= 1e-6


def test_conv_matches_direct_loop(rng):
    layer = Conv2D.init(rng, 2, 3)
    x = rng.normal(size=(1, 5, 5, 2))
    out = layer.forward(x)[0]
    W, b = layer.params["W"], layer.params["b"]
    xp = np.pad(x[0], ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros((5, 5, 3))
    for i in range(5):
        for j in range(5):
            ref[i, j] = np.einsum("abc,abco->o", xp[i:i + 3, j:j + 3], W) + b
    assert np.allclose(out[0], ref, atol=1e-12)


def test_maxpool_gradient_matches_central_differences(rng):
    layer = MaxPool2()
    x = rng.permutation(2 * 6 * 6 * 3).reshape(2, 6, 6, 3).astype(float) * 0.01
    out, cache = layer.forward(x)
    w = rng.normal(size=out.shape)
    dx, _ = layer.backward(w, cache)
    assert max_rel(dx, fd_layer(layer, x, w)) <= 1e-6


def test_maxpool_ties_route_to_first():
    layer = MaxPool2()
    x = np.ones((1, 2, 2, 1))
    out, cache = layer.forward(x)
    dx, _ = layer.backward(np.ones_like(out), cache)
    assert dx[0, :, :, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_dense_gradients_match_central_differences(rng):
    layer = Dense.init(rng, 8, 4)
    layer.params["b"] = rng.normal(size=4)
    x = rng.normal(size=(3, 8))
    out, cache = layer.forward(x)
    w = rng.normal(size=out.shape)
    dx, grads = layer.backward(w, cache)
    assert max_rel(dx, fd_layer(layer, x, w)) <= 1e-6
    assert max_rel(grads["W"], fd_param(layer, x, w, "W")) <= 1e-6
    assert max_rel(grads["b"], fd_param(layer, x, w, "b")) <= 1e-6


@pytest.mark.parametrize("layer", [ReLU(), Center(), Flatten()])
def test_parameterless_layers(layer, rng):
    x = rng.normal(size=(2, 4, 4, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the relu kink
    out, cache = layer.forward(x)
    w = rng.normal(size=out.shape)
    dx, _ = layer.backward(w, cache)
    assert max_rel(dx, fd_layer(layer, x, w)) <= 1e-6


def dense_softmax_model(rng, shape=(2, 2, 1), k=3):
    d = int(np.prod(shape))
    return Model([Flatten(), Dense(rng.normal(size=(d, k)), rng.normal(size=k))], NAMES[:k], shape)


def test_dense_softmax_input_gradient(rng):
    m = dense_softmax_model(rng)
    x = rng.random((2, 2, 1))
    g = m.backward_input(x, label=1)
    h = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (cross_entropy(m.forward(xp), 1) - cross_entropy(m.forward(xm), 1)) / (2 * h)
    assert max_rel(g, fd) <= 1e-6


def test_small_cnn_input_gradient_at_100_pixels(rng):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(4, 6, 8), seed=3)
    x = rng.random((16, 16, 3))
    g = m.backward_input(x, label=2)
    h = 1e-6
    flat = rng.choice(x.size, 100, replace=False)
    errs = []
    for f in flat:
        idx = np.unravel_index(f, x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        fd = (cross_entropy(m.forward(xp), 2) - cross_entropy(m.forward(xm), 2)) / (2 * h)
        errs.append(abs(g[idx] - fd) / max(abs(fd), 1e-6))
    assert max(errs) <= 1e-4


def test_softmax_ce_gradient_is_probs_minus_onehot(rng):
    k = 5
    z = rng.normal(size=k) * 3
    m = Model([Flatten(), Dense(np.eye(k), np.zeros(k))], NAMES, (1, 1, k))
    for label in range(k):
        got = m.backward_input(z.reshape(1, 1, k), label=label).reshape(-1)
        p = softmax(z)
        jac = np.diag(p) - np.outer(p, p)  # dp/dz
        dce_dp = np.zeros(k)
        dce_dp[label] = -1.0 / p[label]
        assert np.max(np.abs(got - jac.T @ dce_dp)) <= 1e-10


def test_zero_final_dense_gives_uniform(rng):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2))
    m.layers[-1].params["W"][:] = 0
    p = m.forward(rng.random((16, 16, 3)))
    assert np.allclose(p, 1 / 5, atol=1e-15)


@given(st.integers(0, 2**31 - 1))
def test_probabilities_sum_to_one(seed):
    r = np.random.default_rng(seed)
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2), seed=seed % 7)
    p = m.forward(r.random((3, 16, 16, 3)))
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_identical_inputs_identical_outputs(rng):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2))
    x = rng.random((16, 16, 3))
    assert np.array_equal(m.forward(x), m.forward(x.copy()))


def test_shape_mismatch():
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2))
    with pytest.raises(ContractViolationError):
        m.forward(np.zeros((8, 8, 3)))


def test_cross_entropy_examples():
    assert abs(cross_entropy(np.full(5, 0.2), 3) - math.log(5)) < 1e-12
    assert cross_entropy(np.array([0.0, 1.0]), 1) == 0.0
    assert abs(cross_entropy(np.full(10, 0.1), 0) - 2.302585092994046) < 1e-9
    assert abs(cross_entropy(np.array([1.0, 0.0]), 1) + math.log(1e-12)) < 1e-9


def test_zero_upstream_gives_zero_input_gradient(rng):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2))
    assert not np.any(m.backward_input(rng.random((16, 16, 3)), dlogits=np.zeros(5)))


def tiny_dataset(seed=0, n=20, k=3, size=16):
    r = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), n)
    images = r.random((k * n, size, size, 3)) * 0.4
    images[np.arange(k * n), :, :, labels % 3] += 0.5
    is_val = np.zeros(k * n, bool)
    is_val[::5] = True
    return LabeledDataset(images, labels, is_val, NAMES[:k])


def test_train_deterministic_and_learns():
    ds = tiny_dataset()
    m0 = build_model(ds.class_names, input_shape=(16, 16, 3), channels=(4, 4, 4), seed=1)
    a, ra = train(m0, ds, epochs=8, lr=0.05, batch=8, seed=4)
    b, rb = train(m0, ds, epochs=8, lr=0.05, batch=8, seed=4)
    for la, lb in zip(a.layers, b.layers):
        for k in la.params:
            assert np.array_equal(la.params[k], lb.params[k])
    assert ra.val_accuracy == rb.val_accuracy
    assert ra.val_accuracy >= 0.9
    # the input model is left untouched
    assert not np.array_equal(m0.layers[-1].params["W"], a.layers[-1].params["W"])


def test_zero_epochs_returns_initial_model():
    ds = tiny_dataset()
    m0 = build_model(ds.class_names, input_shape=(16, 16, 3), channels=(2, 2, 2), seed=1)
    m, rep = train(m0, ds, epochs=0)
    assert rep.epochs == 0 and rep.loss_history == []
    assert np.array_equal(m.layers[-1].params["W"], m0.layers[-1].params["W"])


def test_divergence_raises():
    ds = tiny_dataset()
    m0 = build_model(ds.class_names, input_shape=(16, 16, 3), channels=(2, 2, 2), seed=1)
    with np.errstate(all="ignore"), pytest.raises(TrainingFailureError):
        train(m0, ds, epochs=5, lr=1e200, batch=8)


def test_checkpoint_round_trip(tmp_path, rng):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 3, 4), seed=2)
    path = tmp_path / "m.bin"
    save_model(m, path)
    m2 = load_model(path)
    assert m2.class_names == NAMES and tuple(m2.input_shape) == (16, 16, 3)
    x = rng.random((2, 16, 16, 3))
    assert np.array_equal(m.logits(x), m2.logits(x))
    save_model(m2, tmp_path / "m2.bin")
    assert path.read_bytes() == (tmp_path / "m2.bin").read_bytes()
    assert path.read_bytes()[:8] == b"PFMODEL1"


@pytest.mark.parametrize("damage", ["magic", "truncate"])
def test_corrupt_checkpoint(tmp_path, damage):
    m = build_model(NAMES, input_shape=(16, 16, 3), channels=(2, 2, 2))
    path = tmp_path / "m.bin"
    save_model(m, path)
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:] if damage == "magic" else data[:len(data) // 2])
    with pytest.raises(CorruptInputError):
        load_model(path)
