import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poselift import numcore as nc
from poselift.numcore import Parameter, ShapeError, StateError


def _p(rng, shape, name):
    return Parameter(rng.normal(size=shape), name=name)


def test_linear_zero_weights_gives_bias_rows():
    x = nc.Tensor(np.arange(6.0).reshape(3, 2))
    w = Parameter(np.zeros((2, 4)), "w")
    b = Parameter(np.array([1.0, -2.0, 0.5, 3.0]), "b")
    out = nc.linear(x, w, b).data
    assert np.array_equal(out, np.tile(b.data, (3, 1)))


def test_linear_matches_triple_loop():
    rng = np.random.default_rng(0)
    x, w, b = rng.normal(size=(4, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
    ref = np.zeros((4, 5))
    for i in range(4):
        for j in range(5):
            ref[i, j] = b[j] + sum(x[i, k] * w[k, j] for k in range(3))
    out = nc.linear(nc.Tensor(x), Parameter(w, "w"), Parameter(b, "b")).data
    assert np.abs(out - ref).max() < 1e-12


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        nc.matmul(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((4, 2))))


def test_softmax_rows_sum_to_one_even_for_huge_logits():
    x = nc.Tensor(np.array([[1000.0, 1000.0, -1000.0], [0.0, 1e-3, 5.0]]))
    s = nc.softmax(x).data
    assert np.all(np.isfinite(s))
    assert np.abs(s.sum(-1) - 1).max() < 1e-12
    assert np.allclose(s[0], [0.5, 0.5, 0.0])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(-50, 50))
def test_softmax_shift_invariance(rows, cols, shift):
    x = np.random.default_rng(rows * 31 + cols).normal(size=(rows, cols))
    a = nc.softmax(nc.Tensor(x)).data
    b = nc.softmax(nc.Tensor(x + shift)).data
    assert np.abs(a - b).max() < 1e-12


def test_layer_norm_zero_mean_unit_var():
    rng = np.random.default_rng(1)
    x = nc.Tensor(rng.normal(3.0, 5.0, size=(4, 7)))
    y = nc.layer_norm(x, Parameter(np.ones(7), "g"), Parameter(np.zeros(7), "b")).data
    assert np.abs(y.mean(-1)).max() < 1e-12
    assert np.abs(y.var(-1) - 1).max() < 1e-3


@pytest.mark.parametrize("op", ["gelu", "softmax", "layer_norm", "normalize_rows", "row_norm",
                                "gather_rows", "transpose", "permute"])
def test_op_gradients(op):
    rng = np.random.default_rng(5)
    x = Parameter(rng.normal(size=(2, 4, 3)) + 0.1, "x")
    proj = rng.normal(size=(2, 4, 3))
    g = Parameter(rng.normal(size=3), "g")
    b = Parameter(rng.normal(size=3), "b")

    def loss():
        if op == "gelu":
            y = nc.gelu(x)
        elif op == "softmax":
            y = nc.softmax(x)
        elif op == "layer_norm":
            y = nc.layer_norm(x, g, b)
        elif op == "normalize_rows":
            y = nc.normalize_rows(nc.mul(x, x))
        elif op == "row_norm":
            return nc.sum(nc.mul(nc.row_norm(x), nc.Tensor(proj[..., 0])))
        elif op == "gather_rows":
            y = nc.gather_rows(x, np.array([[0, 2], [3, 3]]))
            return nc.sum(nc.mul(y, nc.Tensor(proj[:, :2])))
        elif op == "transpose":
            y = nc.transpose(x)
            return nc.sum(nc.mul(y, nc.Tensor(proj.transpose(0, 2, 1))))
        else:
            y = nc.permute(x, (1, 0, 2))
            return nc.sum(nc.mul(y, nc.Tensor(proj.transpose(1, 0, 2))))
        return nc.sum(nc.mul(y, nc.Tensor(proj)))

    params = [x, g, b] if op == "layer_norm" else [x]
    errs = nc.gradcheck(loss, params)
    assert max(errs.values()) < 1e-6, errs


def test_gradcheck_detects_wrong_gradient():
    rng = np.random.default_rng(2)
    p = _p(rng, (3,), "p")

    def bad():
        # forward computes p**2 but the backward claims 3p
        def bw(g):
            return (g * 3 * p.data,)
        return nc.sum(nc._node(p.data ** 2, (p,), bw))

    assert max(nc.gradcheck(bad, [p]).values()) > 0.1


def test_double_backward_raises():
    p = Parameter(np.ones(3), "p")
    loss = nc.sum(nc.mul(p, p))
    nc.backward(loss)
    with pytest.raises(StateError):
        nc.backward(loss)


def test_stale_gradient_raises():
    p = Parameter(np.ones(3), "p")
    nc.backward(nc.sum(p))
    with pytest.raises(StateError, match="not reset"):
        nc.backward(nc.sum(p))


def test_backward_needs_scalar():
    p = Parameter(np.ones(3), "p")
    with pytest.raises(ShapeError):
        nc.backward(nc.mul(p, p))


def test_frozen_parameter_reports_zero_grad():
    a = Parameter(np.ones(3), "a")
    b = Parameter(np.full(3, 2.0), "b")
    b.trainable = False
    nc.backward(nc.sum(nc.mul(a, b)))
    assert np.array_equal(a.grad, b.data)
    assert np.array_equal(b.grad, np.zeros(3))


def test_no_grad_builds_no_graph():
    p = Parameter(np.ones(2), "p")
    with nc.no_grad():
        y = nc.sum(nc.mul(p, p))
    assert not y.requires_grad
    with pytest.raises(StateError):
        nc.backward(y)


def test_broadcast_bias_gradient_sums_over_rows():
    x = nc.Tensor(np.ones((5, 2)))
    b = Parameter(np.zeros(2), "b")
    nc.backward(nc.sum(nc.add(x, b)))
    assert np.array_equal(b.grad, [5.0, 5.0])


def test_glorot_bounds_and_determinism():
    w1 = nc.glorot(np.random.default_rng(3), 20, 30)
    w2 = nc.glorot(np.random.default_rng(3), 20, 30)
    assert np.array_equal(w1, w2)
    assert np.abs(w1).max() <= np.sqrt(6 / 50)


def test_lr_step_schedule():
    assert nc.lr_at(8, 1e-3, 0.9, 4) == pytest.approx(0.00081, abs=1e-15)
    assert nc.lr_at(3, 1e-3, 0.9, 4) == 1e-3


def test_adam_first_step_is_lr_times_sign():
    p = Parameter(np.array([1.0, -1.0, 0.5]), "p")
    opt = nc.Adam([p], nc.OptimizerState(lr=0.1))
    opt.zero_grad()
    nc.backward(nc.sum(nc.mul(p, nc.Tensor(np.array([2.0, -3.0, 0.5])))))
    opt.step()
    # bias-corrected first step moves each coordinate by ~lr * sign(grad)
    assert np.allclose(p.data, [0.9, -0.9, 0.4], atol=1e-6)


def test_adam_matches_reference_over_steps():
    rng = np.random.default_rng(4)
    w0 = rng.normal(size=4)
    p = Parameter(w0.copy(), "p")
    opt = nc.Adam([p], nc.OptimizerState(lr=0.01))
    m = v = np.zeros(4)
    w = w0.copy()
    for t in range(1, 6):
        target = rng.normal(size=4)
        opt.zero_grad()
        d = nc.sub(p, target)
        nc.backward(nc.sum(nc.mul(d, d)))
        opt.step()
        g = 2 * (w - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.abs(p.data - w).max() < 1e-12


def test_adam_step_without_backward_raises():
    p = Parameter(np.ones(2), "p")
    opt = nc.Adam([p])
    with pytest.raises(StateError):
        opt.step()


def test_adam_leaves_frozen_parameters():
    a = Parameter(np.ones(2), "a")
    b = Parameter(np.ones(2), "b", trainable=False)
    opt = nc.Adam([a, b], nc.OptimizerState(lr=0.5))
    nc.backward(nc.sum(nc.mul(a, b)))
    opt.step()
    assert np.array_equal(b.data, np.ones(2))
    assert not np.array_equal(a.data, np.ones(2))
