import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dkm.autodiff import Graph, NumericError, ShapeError, backward, fd_check, grads_by_name


def unary_cases():
    # grad_reverse is left out: its backward is deliberately not the derivative
    return {
        "relu": lambda g, x: g.sum(g.relu(x)),
        "exp": lambda g, x: g.sum(g.exp(x)),
        "log": lambda g, x: g.sum(g.log(x)),
        "sigmoid": lambda g, x: g.sum(g.sigmoid(x)),
        "mean": lambda g, x: g.mean(g.mul(x, x)),
        "mean0": lambda g, x: g.sum(g.mul(g.mean(x, axis=0), g.mean(x, axis=0))),
        "sum1": lambda g, x: g.sum(g.exp(g.sum(x, axis=1))),
        "log_softmax": lambda g, x: g.sum(g.mul(g.log_softmax(x), g.constant(np.arange(12.0).reshape(3, 4)))),
        "l2_normalize": lambda g, x: g.sum(g.mul(g.l2_normalize(x), g.constant(np.ones((3, 4))))),
        "clamp": lambda g, x: g.sum(g.mul(g.clamp(x, -1.0, 1.0), x)),
        "transpose": lambda g, x: g.sum(g.matmul(g.transpose(x), x)),
        "scalar_ops": lambda g, x: g.sum(g.mul(g.scalar_add(g.scalar_mul(x, 3.0), 1.0), x)),
    }


@pytest.mark.parametrize("name", sorted(unary_cases()))
@pytest.mark.parametrize("seed", range(3))
def test_every_op_matches_central_differences(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2, 2, (3, 4))
    if name == "log":
        x = np.abs(x) + 0.1
    if name in ("relu", "clamp"):
        # keep entries away from the kinks at 0 and +-1
        x = np.where(np.abs(np.abs(x) - 1.0) < 0.05, x + 0.1, x)
        x = np.where(np.abs(x) < 0.05, 0.3, x)
    fn = unary_cases()[name]
    res = fd_check(lambda g, p: fn(g, p["x"]), {"x": x})
    assert res.ok and res.max_rel_error < 1e-4, (name, res)


def test_binary_ops_and_bias_broadcast():
    rng = np.random.default_rng(0)
    params = {"a": rng.uniform(-2, 2, (3, 4)), "b": rng.uniform(-2, 2, (4,)), "c": rng.uniform(-2, 2, (3, 4))}

    def closure(g, p):
        h = g.sub(g.add(p["a"], p["b"]), g.mul(p["c"], p["a"]))
        return g.sum(g.mul(h, h))

    assert fd_check(closure, params).max_rel_error < 1e-6


def test_matmul_chain_against_finite_differences():
    rng = np.random.default_rng(3)
    params = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2)), "c": rng.standard_normal((2, 3))}
    res = fd_check(lambda g, p: g.sum(g.matmul(g.matmul(p["a"], p["b"]), p["c"])), params)
    assert res.max_rel_error < 1e-6


def test_concat_rows_gradient_splits():
    rng = np.random.default_rng(4)
    params = {"a": rng.standard_normal((2, 3)), "b": rng.standard_normal((1, 3))}
    res = fd_check(lambda g, p: g.sum(g.exp(g.concat_rows(p["a"], p["b"]))), params)
    assert res.max_rel_error < 1e-6


def test_quadratic_fd_error_is_tiny():
    res = fd_check(lambda g, p: g.sum(g.mul(p["x"], p["x"])), {"x": np.array([[0.3, -1.2, 2.0]])})
    assert res.max_rel_error < 1e-6


def test_fd_check_empty_params_is_zero():
    res = fd_check(lambda g, p: g.sum(g.constant(np.ones((1, 1)))), {})
    assert res.max_rel_error == 0.0 and res.ok


def test_fd_check_reports_non_finite():
    def closure(g, p):
        # exp overflows once the probe moves x upward
        return g.sum(g.exp(g.scalar_mul(p["x"], 1e5)))

    res = fd_check(closure, {"x": np.array([[0.007]])}, step=1e-2)
    assert not res.ok and "x" in res.failure


def test_relu_and_grad_reverse_forward():
    g = Graph()
    assert g.relu(g.constant(np.array([[-1.0, 2.0]]))).value.tolist() == [[0.0, 2.0]]
    x = np.array([[3.5]])
    out = g.grad_reverse(g.leaf(x), scale=2.0)
    assert out.value.tobytes() == x.tobytes()


def test_square_derivative():
    g = Graph()
    x = g.leaf(np.array([[3.0]]))
    grads = backward(g, g.sum(g.mul(x, x)))
    assert grads[x.id].item() == 6.0


def test_grad_reverse_of_mean():
    g = Graph()
    x = g.leaf(np.ones((1, 4)))
    grads = backward(g, g.mean(g.grad_reverse(x, scale=1.0)))
    np.testing.assert_array_equal(grads[x.id], np.full((1, 4), -0.25))


def test_grad_reverse_scales_identity_gradient():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3))
    w = rng.standard_normal((2, 3))
    for s in (0.5, 1.0, 3.0):
        g1 = Graph()
        a = g1.leaf(x)
        plain = backward(g1, g1.sum(g1.mul(a, g1.constant(w))))[a.id]
        g2 = Graph()
        b = g2.leaf(x)
        rev = backward(g2, g2.sum(g2.mul(g2.grad_reverse(b, s), g2.constant(w))))[b.id]
        np.testing.assert_array_equal(rev, -s * plain)


def test_log_softmax_uniform_and_normalised():
    g = Graph()
    out = g.log_softmax(g.constant(np.zeros((1, 4)))).value
    np.testing.assert_allclose(out, -np.log(4) * np.ones((1, 4)), rtol=0, atol=1e-15)
    x = np.random.default_rng(2).uniform(-50, 50, (5, 7))
    rows = np.exp(g.log_softmax(g.constant(x)).value).sum(axis=1)
    assert np.all(np.abs(rows - 1) < 1e-12)


def test_linearity_of_backward():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((3, 3))
    g = Graph()
    a = g.leaf(x)
    l1 = g.sum(g.exp(a))
    l2 = g.mean(g.mul(a, a))
    both = backward(g, g.add(l1, l2))[a.id]
    sep = backward(g, l1)[a.id] + backward(g, l2)[a.id]
    np.testing.assert_allclose(both, sep, rtol=1e-14, atol=1e-14)


def test_unreachable_and_constant_nodes_have_no_gradient():
    g = Graph()
    a = g.leaf(np.ones((1, 2)))
    b = g.leaf(np.ones((1, 2)))
    c = g.constant(np.ones((1, 2)))
    grads = backward(g, g.sum(g.mul(a, c)))
    assert a.id in grads and b.id not in grads and c.id not in grads
    named = grads_by_name(g, grads, {"a": a, "b": b})
    np.testing.assert_array_equal(named["b"], np.zeros((1, 2)))


def test_non_scalar_loss_rejected():
    g = Graph()
    a = g.leaf(np.ones((2, 2)))
    with pytest.raises(ShapeError):
        backward(g, a)


@pytest.mark.parametrize("build", [
    lambda g: g.add(g.constant(np.ones((2, 3))), g.constant(np.ones((3, 2)))),
    lambda g: g.mul(g.constant(np.ones((2, 3))), g.constant(np.ones((3,)))),
    lambda g: g.matmul(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 3)))),
    lambda g: g.concat_rows(g.constant(np.ones((2, 3))), g.constant(np.ones((2, 4)))),
])
def test_shape_mismatch_names_op(build):
    with pytest.raises(ShapeError) as err:
        build(Graph())
    assert ":" in str(err.value)


def test_non_finite_forward_raises():
    g = Graph()
    with pytest.raises(NumericError):
        g.exp(g.constant(np.array([[1000.0]])))


def test_log_floor_keeps_values_finite():
    g = Graph()
    x = g.leaf(np.array([[0.0, -3.0, 1.0]]))
    out = g.log(x)
    np.testing.assert_allclose(out.value, np.log([[1e-7, 1e-7, 1.0]]))
    grads = backward(g, g.sum(out))[x.id]
    np.testing.assert_array_equal(grads, [[0.0, 0.0, 1.0]])


def test_l2_normalize_zero_row_stays_zero():
    g = Graph()
    out = g.l2_normalize(g.constant(np.zeros((2, 3))))
    assert np.array_equal(out.value, np.zeros((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.floats(0.1, 3.0))
def test_sigmoid_bounded_and_grad_reverse_identity(values, scale):
    x = np.array(values).reshape(2, 3)
    g = Graph()
    s = g.sigmoid(g.constant(x)).value
    assert np.all((s > 0) & (s < 1))
    assert g.grad_reverse(g.constant(x), scale).value.tobytes() == x.tobytes()
