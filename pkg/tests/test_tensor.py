import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lossmix_lab import tensor as T
from lossmix_lab.losses import cross_entropy


def _weighted_sum(node, rng):
    """Scalar probe sum(node * R) so every output coordinate matters."""
    r = rng.standard_normal(node.value.shape)
    return T.sum(T.mul(node, T.const(r)))


def _separated(rng, shape, gap=0.05):
    """Random values with pairwise gaps >= gap (no near-ties for max-pool)."""
    n = int(np.prod(shape))
    v = (rng.permutation(n) + rng.uniform(0.2, 0.8, n)) * gap
    return (v - v.mean()).reshape(shape)


def _away_from(rng, shape, points, margin=0.02):
    x = rng.standard_normal(shape) * 1.5
    for p in points:
        for s in (1.0, -1.0):
            near = np.abs(x - s * p) < margin
            x[near] += np.where(x[near] >= s * p, margin, -margin)
    return x


# op -> (input builder, scalar function of the input node)
def _cases():
    def unary(op, build):
        return build, lambda x, rng: _weighted_sum(op(x), rng)

    def with_const(op, other_shape=None):
        def f(x, rng):
            shape = x.value.shape if other_shape is None else other_shape
            return _weighted_sum(op(x, T.const(rng.standard_normal(shape))), rng)
        return f

    normal = lambda rng: rng.standard_normal((3, 4))  # noqa: E731
    return {
        "add": (normal, with_const(T.add)),
        "sub": (normal, with_const(T.sub)),
        "mul": (normal, with_const(T.mul)),
        "mul_self": (normal, lambda x, rng: _weighted_sum(T.mul(x, x), rng)),
        "scale": unary(lambda x: T.scale(x, -0.7), normal),
        "add_n": (normal, lambda x, rng: _weighted_sum(T.add_n([x, T.scale(x, 2.0), x]), rng)),
        "relu": unary(T.relu, lambda rng: _away_from(rng, (3, 4), [0.0])),
        "sigmoid": unary(T.sigmoid, normal),
        "softplus": unary(T.softplus, lambda rng: rng.standard_normal((3, 4)) * 5),
        "log": unary(T.log, lambda rng: rng.uniform(0.2, 3.0, (3, 4))),
        "smooth_l1": unary(T.smooth_l1, lambda rng: _away_from(rng, (3, 4), [1.0])),
        "softmax": unary(T.softmax, normal),
        "log_softmax": unary(T.log_softmax, normal),
        "sum_all": (normal, lambda x, rng: T.scale(T.sum(x), 1.3)),
        "sum_axis0": unary(lambda x: T.sum(x, axis=0), normal),
        "mean_axis1": unary(lambda x: T.mean(x, axis=1), normal),
        "mean_all": (normal, lambda x, rng: T.mean(T.mul(x, x))),
        "reshape": unary(lambda x: T.reshape(x, (2, 6)), normal),
        "take": unary(lambda x: T.take(x, [2, 0, 2, 1]), normal),
        "broadcast_rows": unary(lambda x: T.broadcast_rows(x, 3), lambda rng: rng.standard_normal(5)),
        "concat": unary(lambda x: T.concat([x, T.scale(x, 3.0)], axis=1), normal),
        "matmul_left": (normal, with_const(T.matmul, (4, 2))),
        "matmul_right": (normal, lambda x, rng: _weighted_sum(
            T.matmul(T.const(rng.standard_normal((5, 3))), x), rng)),
        "conv2d_same_x": (lambda rng: rng.standard_normal((2, 5, 4, 2)), lambda x, rng: _weighted_sum(
            T.conv2d(x, T.const(rng.standard_normal((3, 3, 2, 3))), T.const(rng.standard_normal(3))), rng)),
        "conv2d_valid_w": (lambda rng: rng.standard_normal((3, 3, 2, 3)), lambda x, rng: _weighted_sum(
            T.conv2d(T.const(rng.standard_normal((2, 5, 6, 2))), x, padding="valid"), rng)),
        "conv2d_bias": (lambda rng: rng.standard_normal(3), lambda x, rng: _weighted_sum(
            T.conv2d(T.const(rng.standard_normal((1, 4, 4, 2))), T.const(rng.standard_normal((3, 3, 2, 3))), x), rng)),
        "max_pool2": unary(T.max_pool2, lambda rng: _separated(rng, (2, 4, 6, 3))),
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_every_op_passes_grad_check_on_100_seeds(name):
    build, fn = CASES[name]
    worst = 0.0
    for seed in range(100):
        x = build(np.random.default_rng(seed))
        f = lambda node, seed=seed: fn(node, np.random.default_rng(10_000 + seed))  # noqa: E731
        worst = max(worst, T.grad_check(f, x, eps=1e-5))
    assert worst < 1e-6, f"{name}: {worst:.3e}"


def test_forward_examples():
    x = T.var(np.array([2.0, 3.0]))
    np.testing.assert_array_equal(T.scale(x, 1.0).value, [2.0, 3.0])
    np.testing.assert_array_equal(T.add(T.const([1.0, 2.0]), T.const([3.0, 4.0])).value, [4.0, 6.0])
    np.testing.assert_allclose(T.softmax(T.const(np.zeros(3))).value, np.full(3, 1 / 3), rtol=0, atol=1e-15)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(T.ShapeError) as exc:
        T.add(T.const(np.zeros(2)), T.const(np.zeros(3)))
    assert exc.value.op == "add"
    assert (2,) in exc.value.shapes and (3,) in exc.value.shapes
    with pytest.raises(T.ShapeError, match="matmul"):
        T.matmul(T.const(np.zeros((2, 3))), T.const(np.zeros((2, 3))))


def test_backward_sum_gives_ones_and_unused_inputs_get_zero():
    x = T.var(np.random.default_rng(0).standard_normal((2, 3, 4)), "x")
    unused = T.var(np.ones(5), "u")
    g = T.backward(T.sum(x), {"x": x, "u": unused})
    np.testing.assert_array_equal(g["x"], np.ones((2, 3, 4)))
    np.testing.assert_array_equal(g["u"], np.zeros(5))


def test_backward_linear_combination_weights():
    a, b = T.var(np.array(1.5), "a"), T.var(np.array(-2.0), "b")
    g = T.backward(T.add(T.scale(a, 0.3), T.scale(b, 0.7)), {"a": a, "b": b})
    assert g["a"] == 0.3 and g["b"] == 0.7


def test_backward_rejects_non_scalar_root():
    with pytest.raises(T.ShapeError):
        T.backward(T.var(np.zeros(3)))


def test_cross_entropy_of_softmax_matches_finite_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        onehot = np.eye(5)[rng.integers(5)]
        err = T.grad_check(lambda z: cross_entropy(z, onehot), rng.standard_normal(5) * 3, eps=1e-5)
        assert err < 1e-6


def test_grad_check_examples():
    assert T.grad_check(lambda x: T.sum(T.mul(x, x)), np.array([1.0, -2.0, 3.0]), 1e-5) < 1e-8
    assert T.grad_check(lambda x: T.const(4.0), np.array([1.0, 2.0]), 1e-5) == 0.0
    with pytest.raises(FloatingPointError), np.errstate(invalid="ignore"):
        T.grad_check(lambda x: T.log(x), np.array([-1.0]))


def test_grad_check_kink_skipping_reports_counts():
    # the probe at x=0 straddles the relu kink: analytic 0, central difference 0.5
    f = lambda x: T.sum(T.relu(x))  # noqa: E731
    x = np.array([0.0, 1.0, -2.0])
    info = {}
    assert T.grad_check(f, x, skip_kinks=True, report=info) < 1e-9
    assert info == {"checked": 2, "skipped": 1}
    assert T.grad_check(f, x) > 0.5


def test_stop_gradient_and_grad_reverse():
    x = T.var(np.array([1.0, -2.0]), "x")
    g = T.backward(T.sum(T.mul(T.stop_gradient(x), x)), {"x": x})
    np.testing.assert_array_equal(g["x"], x.value)
    g = T.backward(T.sum(T.grad_reverse(T.scale(x, 3.0))), {"x": x})
    np.testing.assert_array_equal(g["x"], [-3.0, -3.0])
    np.testing.assert_array_equal(T.grad_reverse(x, 0.5).value, x.value)


def test_max_pool_ties_route_to_first_max():
    x = T.var(np.ones((1, 2, 2, 1)), "x")
    g = T.backward(T.sum(T.max_pool2(x)), {"x": x})["x"]
    np.testing.assert_array_equal(g.ravel(), [1.0, 0.0, 0.0, 0.0])


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 5, 4, 3))
    w = rng.standard_normal((3, 3, 3, 2))
    out = T.conv2d(T.const(x), T.const(w), padding="same").value
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 4, 2))
    for n in range(2):
        for i in range(5):
            for j in range(4):
                ref[n, i, j] = np.einsum("abc,abcd->d", xp[n, i:i + 3, j:j + 3], w)
    np.testing.assert_allclose(out, ref, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_linearity(seed, a, b):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 2))

    def l1(x):
        return T.sum(T.softplus(T.matmul(x, T.const(w))))

    def l2(x):
        return T.mean(T.mul(T.sigmoid(x), x))

    def grad(fn):
        x = T.var(x0, "x")
        return T.backward(fn(x), {"x": x})["x"]

    combined = grad(lambda x: T.add(T.scale(l1(x), a), T.scale(l2(x), b)))
    np.testing.assert_allclose(combined, a * grad(l1) + b * grad(l2), rtol=0, atol=1e-12)


def test_forward_backward_bit_deterministic():
    rng = np.random.default_rng(9)
    x0, w0 = rng.standard_normal((2, 8, 8, 3)), rng.standard_normal((3, 3, 3, 4))

    def run():
        x, w = T.var(x0, "x"), T.var(w0, "w")
        root = T.sum(T.max_pool2(T.relu(T.conv2d(x, w))))
        return root.value, T.backward(root, {"x": x, "w": w})

    (v1, g1), (v2, g2) = run(), run()
    assert v1.tobytes() == v2.tobytes()
    for k in g1:
        assert g1[k].tobytes() == g2[k].tobytes()
