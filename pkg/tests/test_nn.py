import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from metaembed.exceptions import ContractViolation
from metaembed.nn import (
    Adam,
    AdamState,
    Dense,
    Sequential,
    adam_step,
    backward,
    forward,
    gradient_check,
    load_checkpoint,
    monotone_adam,
    numeric_gradients,
    relative_error,
    save_checkpoint,
    sigmoid,
    squared_loss,
)


def test_identity_layer_passes_input_through():
    layer = Dense(np.eye(3), np.zeros(3), "relu")
    np.testing.assert_array_equal(forward(layer, [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_relu_clips_negative_preactivation():
    layer = Dense(np.eye(2), np.zeros(2), "relu")
    np.testing.assert_array_equal(layer.forward([-1.0, 2.0]), [0.0, 2.0])


def test_sigmoid_at_zero():
    layer = Dense(np.zeros((1, 1)), np.zeros(1), "sigmoid")
    assert layer.forward([5.0])[0] == 0.5


def test_sigmoid_stable_at_extremes():
    out = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_forward_matches_formula(rng):
    w, b = rng.normal(size=(4, 3)), rng.normal(size=4)
    x = rng.normal(size=3)
    np.testing.assert_allclose(Dense(w, b, "identity").forward(x), w @ x + b)


def test_batch_forward_matches_rowwise(rng):
    layer = Dense.glorot(3, 4, "relu", rng)
    X = rng.normal(size=(5, 3))
    rows = np.array([layer.forward(x) for x in X])
    np.testing.assert_allclose(layer.forward(X), rows)


def test_width_mismatch_raises():
    with pytest.raises(ContractViolation):
        Dense(np.eye(2), np.zeros(2)).forward(np.ones(3))


def test_bad_activation_and_shapes():
    with pytest.raises(ContractViolation):
        Dense(np.eye(2), np.zeros(2), "tanh")
    with pytest.raises(ContractViolation):
        Dense(np.eye(2), np.zeros(3))


def test_backward_needs_forward():
    with pytest.raises(ContractViolation):
        Dense(np.eye(2), np.zeros(2)).backward(np.ones(2))


def test_backward_gradient_shape_checked(rng):
    layer = Dense.glorot(2, 3, "identity", rng)
    layer.forward(np.ones(2))
    with pytest.raises(ContractViolation):
        layer.backward(np.ones(2))


@pytest.mark.parametrize("act", ["relu", "sigmoid", "identity"])
@pytest.mark.parametrize("batch", [False, True])
def test_backprop_matches_finite_differences(act, batch):
    r = np.random.default_rng(7)
    net = Sequential.build([4, 5, 3], [act, "identity"], r)
    x = r.normal(size=(6, 4) if batch else 4)
    target = r.normal(size=(6, 3) if batch else 3)
    if act == "relu":
        # keep preactivations away from the kink
        net.forward(x)
        z = net.layers[0].pre_activation()
        assert np.all(np.abs(z) > 1e-3)
    err = gradient_check(net, x, lambda out: squared_loss(out, target))
    assert err < 1e-6


def test_backward_returns_input_gradient(rng):
    net = Sequential.build([3, 2], ["identity"], rng)
    x = rng.normal(size=3)
    out = net.forward(x)
    grads, g_in = backward(net, np.ones_like(out))
    np.testing.assert_allclose(g_in, net.layers[0].weight.sum(axis=0))
    assert len(grads) == 2


def test_numeric_gradients_restore_params():
    p = np.array([1.0, 2.0])
    before = p.copy()
    g = numeric_gradients(lambda: float(np.sum(p ** 2)), [p])[0]
    np.testing.assert_array_equal(p, before)
    np.testing.assert_allclose(g, 2 * before, rtol=1e-8)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1.0]), np.array([1.1]))[0] == pytest.approx(0.1 / 1.1)


def test_adam_first_step_magnitude_is_lr():
    # bias correction makes the first step -lr * sign(g)
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p, lr=0.1)
    adam_step(p, [np.array([3.0, -0.5])], state)
    np.testing.assert_allclose(p[0], [0.9, -1.9], atol=1e-7)
    assert state.step == 1


def test_adam_matches_reference_recurrence(rng):
    p = rng.normal(size=3)
    ours = [p.copy()]
    state = AdamState.for_params(ours, lr=0.01)
    ref, m, v = p.copy(), np.zeros(3), np.zeros(3)
    for t in range(1, 6):
        g = np.sin(ref * t)
        adam_step(ours, [np.sin(ours[0] * t)], state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(ours[0], ref, atol=1e-12)


def test_adam_updates_in_place_and_checks_lengths():
    w = np.zeros(2)
    opt = Adam([w], lr=0.5)
    opt.step([np.ones(2)])
    assert np.all(w < 0)
    with pytest.raises(ContractViolation):
        adam_step([w], [], opt.state)


@given(st.floats(0.01, 2.0), st.integers(0, 1000))
def test_monotone_adam_never_increases(lr, seed):
    r = np.random.default_rng(seed)
    A = r.normal(size=(5, 3))
    y = r.normal(size=5)
    w = np.zeros(3)

    def lg():
        res = A @ w - y
        return float(res @ res), [2 * A.T @ res]

    curve = monotone_adam(lg, [w], AdamState.for_params([w], lr=lr), 60)
    assert all(b <= a for a, b in zip(curve, curve[1:]))
    assert curve[-1] < curve[0]


def test_monotone_adam_early_stop():
    w = np.array([3.0])

    def lg():
        return float(w[0] ** 2), [2 * w]

    curve = monotone_adam(lg, [w], AdamState.for_params([w], lr=0.1), 100,
                          on_epoch=lambda e, c: e >= 4)
    assert len(curve) == 6


def test_checkpoint_roundtrip(tmp_path, rng):
    layers = [Dense.glorot(3, 4, "relu", rng), Dense.glorot(4, 2, "sigmoid", rng)]
    path = tmp_path / "m.dmea"
    save_checkpoint(path, layers)
    assert path.read_bytes()[:4] == b"DMEA"
    loaded = load_checkpoint(path)
    x = rng.normal(size=3)
    a = Sequential(layers).forward(x)
    b = Sequential(loaded).forward(x)
    np.testing.assert_array_equal(a, b)
    assert [l.activation for l in loaded] == ["relu", "sigmoid"]


def test_checkpoint_rejects_garbage(tmp_path, rng):
    path = tmp_path / "bad.dmea"
    path.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        load_checkpoint(path)
    save_checkpoint(path, [Dense.glorot(2, 2, "relu", rng)])
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ValueError, match="trailing"):
        load_checkpoint(path)
