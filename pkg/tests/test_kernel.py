"""Tape kernel: gradients versus the finite-difference oracle, plus API contracts."""

import numpy as np
import pytest

from fedfraud import kernel as K
from fedfraud.kernel import (
    AdamState,
    LstmParams,
    ParameterBundle,
    ShapeError,
    TapeError,
    Tensor,
    adam_step,
    bce_loss,
    concat,
    constant,
    dense_affine,
    dropout,
    finite_difference_grad,
    glorot,
    loss_eval,
    lstm_cell,
    mse_loss,
    rnn_cell,
    softmax_ce_batch,
    softmax_ce_loss,
    take_rows,
)

RTOL = 1e-4


def check_grad(build, bundle, rtol=RTOL):
    """Compare tape gradients of scalar build(bundle) with central differences."""
    fd = finite_difference_grad(lambda b: float(build(b).data), bundle)
    bundle.zero_grad()
    build(bundle).backward()
    got = np.concatenate([g.ravel() for g in bundle.grads().values()])
    scale = max(1.0, float(np.max(np.abs(fd))))
    assert np.max(np.abs(got - fd)) / scale < rtol, (got, fd)


def make_bundle(rng, **shapes):
    b = ParameterBundle()
    for name, shape in shapes.items():
        b.add(name, rng.normal(size=shape) * 0.5)
    return b.freeze()


def test_dense_affine_gradients():
    rng = np.random.default_rng(0)
    for _ in range(10):
        b = make_bundle(rng, W=(3, 4), b=(3,))
        x = rng.normal(size=4)
        up = rng.normal(size=3)
        check_grad(lambda bb, u=up: (dense_affine(Tensor(x), bb["W"], bb["b"]) * constant(u)).sum(), b)


def test_dense_affine_batch_matches_vector():
    rng = np.random.default_rng(1)
    W = Tensor(rng.normal(size=(3, 4)))
    bias = Tensor(rng.normal(size=3))
    X = rng.normal(size=(5, 4))
    batch = dense_affine(Tensor(X), W, bias).data
    singles = np.stack([dense_affine(Tensor(x), W, bias).data for x in X])
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_shape_error_names_both_shapes():
    W = Tensor(np.zeros((3, 4)))
    b = Tensor(np.zeros(3))
    with pytest.raises(ShapeError) as err:
        dense_affine(Tensor(np.zeros(5)), W, b)
    assert "(3, 4)" in str(err.value) and "5" in str(err.value)


@pytest.mark.parametrize("act", ["relu", "tanh", "sigmoid"])
def test_activation_gradients(act):
    # weight the output with a random linear functional so every coordinate
    # of the activation's derivative is exercised
    rng = np.random.default_rng(2)
    for _ in range(10):
        b = make_bundle(rng, x=(6,))
        up = rng.normal(size=6)
        check_grad(lambda bb, u=up: (K.activation(act, bb["x"]) * constant(u)).sum(), b)


def test_elementwise_op_gradients():
    rng = np.random.default_rng(3)
    ops = [
        lambda t: (t * t).sum(),
        lambda t: (t + t * 2.0 - 1.5).mean(),
        lambda t: (t / 2.5).sum(),
        lambda t: t.exp().sum(),
        lambda t: (t * t + 1.0).log().sum(),
        lambda t: t.abs().sum(),
        lambda t: t.maximum(0.1).sum(),
        lambda t: t.minimum(0.2).sum(),
        lambda t: t.sigmoid().sum(),
        lambda t: t.tanh().mean(),
    ]
    for op in ops:
        b = make_bundle(rng, x=(7,))
        check_grad(lambda bb, o=op: o(bb["x"]), b)


def test_matmul_and_reshape_gradients():
    rng = np.random.default_rng(4)
    b = make_bundle(rng, A=(3, 4), B=(4, 2))
    check_grad(lambda bb: (bb["A"] @ bb["B"]).sum(), b)
    b2 = make_bundle(rng, A=(2, 6))
    check_grad(lambda bb: (bb["A"].reshape(3, 4).transpose() @ Tensor(np.ones(3))).sum(), b2)


def test_take_rows_and_concat_gradients():
    rng = np.random.default_rng(5)
    b = make_bundle(rng, A=(4, 3), B=(2, 3))
    idx = np.array([1, 1, 3, 0])
    check_grad(lambda bb: (take_rows(bb["A"], idx) * take_rows(bb["A"], idx)).sum(), b)
    check_grad(lambda bb: (concat([bb["A"], bb["B"]], axis=0).tanh()).sum(), b)
    check_grad(lambda bb: (concat([bb["B"], bb["B"]], axis=1).sigmoid()).sum(), b)


def test_loss_gradients():
    rng = np.random.default_rng(6)
    y = (rng.random(5) > 0.5).astype(float)
    b = make_bundle(rng, p=(5,))
    check_grad(lambda bb: mse_loss(bb["p"], y), b)
    b2 = make_bundle(rng, x=(5,))
    check_grad(lambda bb: bce_loss(bb["x"].sigmoid(), y), b2)
    b3 = make_bundle(rng, z=(4,))
    check_grad(lambda bb: softmax_ce_loss(bb["z"], 2), b3)
    b4 = make_bundle(rng, Z=(3, 4))
    check_grad(lambda bb: softmax_ce_batch(bb["Z"], [0, 3, 1]), b4)


def test_bce_floor_keeps_loss_finite():
    loss = bce_loss(Tensor(np.array([0.0, 1.0])), np.array([1.0, 0.0]))
    assert np.isfinite(loss.data)
    # clamped to [floor, 1 - floor] -> terms are -log(floor) and -log(1 - (1 - floor))
    expected = 0.5 * (-np.log(1e-12) - np.log(1.0 - (1.0 - 1e-12)))
    assert loss.data == pytest.approx(expected, rel=1e-12)


def test_softmax_ce_matches_closed_form():
    logits = np.array([0.3, -1.2, 2.0])
    loss = softmax_ce_loss(Tensor(logits), 0)
    expected = -np.log(np.exp(0.3) / np.exp(logits).sum())
    assert float(loss.data) == pytest.approx(expected, rel=1e-12)


def test_loss_eval_returns_value_and_gradient():
    value, grad = loss_eval("mse", np.array([1.0, 2.0]), np.array([0.0, 0.0]))
    assert value == pytest.approx(2.5)
    np.testing.assert_allclose(grad, [1.0, 2.0])


def test_rnn_cell_gradients():
    rng = np.random.default_rng(7)
    b = make_bundle(rng, W=(4, 3), U=(4, 4), bias=(4,), x=(3,), z=(4,))
    check_grad(
        lambda bb: rnn_cell(bb["x"], bb["z"], bb["W"], bb["U"], bb["bias"]).sum(), b
    )
    # no previous state: the recurrent term drops out
    b2 = make_bundle(rng, W=(4, 3), U=(4, 4), bias=(4,), x=(3,))
    check_grad(
        lambda bb: rnn_cell(bb["x"], None, bb["W"], bb["U"], bb["bias"]).sum(), b2
    )


def test_lstm_cell_gradients():
    rng = np.random.default_rng(8)
    shapes = {}
    for g in ("i", "f", "g", "o"):
        shapes[f"W_{g}"] = (4, 3)
        shapes[f"U_{g}"] = (4, 4)
        shapes[f"b_{g}"] = (4,)
    shapes["x"] = (3,)
    shapes["h"] = (4,)
    shapes["c"] = (4,)
    b = make_bundle(np.random.default_rng(8), **shapes)
    params = LstmParams(**{k: b[k] for k in shapes if k not in ("x", "h", "c")})

    def run(bb):
        h, c = lstm_cell(bb["x"], bb["h"], bb["c"], params)
        return (h * h).sum() + c.sum()

    check_grad(run, b)


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(9)
    x = Tensor(np.ones((200, 50)))
    out = dropout(x, 0.1, rng, active=True).data
    kept = out[out != 0]
    assert np.allclose(kept, 1.0 / 0.9)
    assert abs(out.mean() - 1.0) < 0.02
    passthrough = dropout(x, 0.1, rng, active=False)
    assert passthrough is x


def test_backward_twice_raises():
    t = Tensor(np.array([1.0, 2.0]))
    s = (t * t).sum()
    s.backward()
    with pytest.raises(TapeError):
        s.backward()


def test_gradients_accumulate_across_roots():
    b = make_bundle(np.random.default_rng(10), x=(3,))
    y1 = (b["x"] * b["x"]).sum()
    y2 = b["x"].sum()
    y1.backward()
    y2.backward()
    np.testing.assert_allclose(b.grads()["x"], 2 * b["x"].data + 1.0)


def test_nonfinite_input_rejected():
    with pytest.raises(K.KernelError):
        Tensor(np.array([1.0, np.inf]))


def test_adam_first_step_is_signed_lr():
    b = ParameterBundle()
    b.add("w", np.array([1.0, -2.0]))
    b.freeze()
    state = AdamState()
    g = {"w": np.array([0.3, -0.7])}
    adam_step(b, g, state, lr=0.01)
    # bias correction makes the first update lr * sign(g) up to eps
    np.testing.assert_allclose(
        b["w"].data, [1.0 - 0.01 * (0.3 / (0.3 + 1e-8)), -2.0 + 0.01 * (0.7 / (0.7 + 1e-8))]
    )


def test_bundle_roundtrip_bytes_identical(tmp_path):
    rng = np.random.default_rng(11)
    b = make_bundle(rng, A=(3, 2), c=(4,))
    blob = b.to_bytes()
    b2 = ParameterBundle()
    b2.add("A", np.zeros((3, 2)))
    b2.add("c", np.zeros(4))
    b2.freeze()
    b2.load_bytes(blob)
    assert b2.to_bytes() == blob
    path = tmp_path / "p.params"
    b.save(path)
    b2.load(path)
    np.testing.assert_array_equal(b2["A"].data, b["A"].data)


def test_bundle_rejects_mismatched_names():
    b = ParameterBundle()
    b.add("A", np.zeros(2))
    b.freeze()
    other = ParameterBundle()
    other.add("B", np.zeros(2))
    other.freeze()
    with pytest.raises(K.KernelError):
        other.load_bytes(b.to_bytes())


def test_frozen_bundle_rejects_new_names():
    b = ParameterBundle().freeze()
    with pytest.raises(K.KernelError):
        b.add("late", np.zeros(1))


def test_glorot_limits():
    rng = np.random.default_rng(12)
    w = glorot(rng, (30, 20))
    limit = np.sqrt(6.0 / 50)
    assert np.all(np.abs(w) <= limit)
    assert np.all(glorot(rng, (7,)) == 0.0)
