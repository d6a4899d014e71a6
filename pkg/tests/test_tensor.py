import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mtvit import tensor as T
from mtvit.errors import ConfigError, MissingGraphError, ShapeError
from mtvit.rng import stream
from mtvit.tensor import Tensor, backward, finite_diff_check, seeded_init


def rand(shape, seed, lo=-1.0, hi=1.0):
    return Tensor(stream(seed, "test").uniform(lo, hi, size=shape), requires_grad=True)


pytestmark = pytest.mark.usefixtures("float64")


# -- backward contract -------------------------------------------------------


def test_grad_sum_of_squares():
    x = Tensor([1.0, 2.0], requires_grad=True)
    grads = backward((x * x).sum())
    np.testing.assert_allclose(grads.of(x), [2.0, 4.0])


def test_grad_plain_sum_is_ones():
    x = rand((3, 4, 2), seed=0)
    grads = backward(x.sum())
    np.testing.assert_array_equal(grads.of(x), np.ones((3, 4, 2)))


def test_grad_softmax_dot_matches_finite_differences():
    c = stream(1, "const").normal(size=5)

    def f(params):
        return (T.softmax(params[0]) * c).sum()

    x = rand((5,), seed=2)
    assert finite_diff_check(f, [x], step=1e-5) < 1e-6


def test_backward_rejects_nonscalar():
    x = rand((3,), seed=3)
    with pytest.raises(ShapeError):
        backward(x * 2.0)


def test_backward_rejects_detached_graph():
    with pytest.raises(MissingGraphError):
        backward(Tensor(1.0))


def test_backward_repeated_calls_identical():
    x = rand((4, 4), seed=4)
    loss = (T.tanh(x @ x) ** 2.0).mean()
    g1 = backward(loss).of(x)
    g2 = backward(loss).of(x)
    np.testing.assert_array_equal(g1, g2)


def test_gradient_accumulates_across_fanout():
    x = Tensor([3.0], requires_grad=True)
    y = x * 2.0
    loss = (y * y + y).sum()  # d/dx = 4*2x + 2 = 26 at x=3
    np.testing.assert_allclose(backward(loss).of(x), [26.0])


def test_unreachable_leaf_absent_from_map():
    x = rand((2,), seed=5)
    y = rand((2,), seed=6)
    grads = backward(x.sum())
    assert x in grads and y not in grads


# -- finite_diff_check contract ----------------------------------------------


def test_finite_diff_constant_is_zero():
    def f(params):
        return (params[0] * 0.0).sum()

    assert finite_diff_check(f, [rand((4,), seed=7)]) == 0.0


def test_finite_diff_quadratic_tight():
    def f(params):
        return (params[0] ** 2.0).sum()

    assert finite_diff_check(f, [rand((6,), seed=8)], step=1e-5) < 1e-8


def test_finite_diff_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: p[0].sum(), [rand((2,), seed=9)], step=0.0)


def test_finite_diff_rejects_nonfinite():
    def f(params):
        return T.log(params[0]).sum()  # log of negative input

    with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
        finite_diff_check(f, [Tensor([-1.0], requires_grad=True)])


# -- per-op gradient checks ---------------------------------------------------

_OP_CASES = {
    "add": lambda a, b: (a + b).sum(),
    "sub": lambda a, b: (a - b).mean(),
    "mul": lambda a, b: (a * b).sum(),
    "div": lambda a, b: (a / (b + 3.0)).sum(),
    "maximum": lambda a, b: T.maximum(a, b * 0.9).sum(),
    "abs": lambda a, b: T.absolute(a + 0.3 * b).sum(),
    "exp": lambda a, b: T.exp(a * b).sum(),
    "log": lambda a, b: T.log(a * a + b * b + 0.5).sum(),
    "tanh": lambda a, b: T.tanh(a + b).sum(),
    "relu": lambda a, b: T.relu(a - b).sum(),
    "sigmoid": lambda a, b: T.sigmoid(3.0 * a - b).sum(),
    "softmax": lambda a, b: (T.softmax(a, axis=-1) * b).sum(),
    "log_softmax": lambda a, b: (T.log_softmax(a, axis=-1) * b).mean(),
    "pow": lambda a, b: ((a * a + 1.0) ** 1.5 + b).sum(),
    "sum_axis": lambda a, b: (a.sum(axis=0) * b.mean(axis=1, keepdims=True).sum()).sum(),
    "mean_axis": lambda a, b: a.mean(axis=(0, 1)) + b.mean(),
    "reshape": lambda a, b: (a.reshape(-1) * b.reshape(-1)).sum(),
    "transpose": lambda a, b: (a.transpose(1, 0) @ b).sum(),
    "getitem": lambda a, b: (a[1:, :2] * b[:3, 1:3]).sum(),
    "concat": lambda a, b: T.concat([a, b], axis=0).mean(),
    "matmul": lambda a, b: (a @ b.transpose(1, 0)).sum(),
    "where": lambda a, b: T.where(a.data > 0, a * b, b - a).sum(),
}


@pytest.mark.parametrize("name", sorted(_OP_CASES))
def test_op_gradients_match_finite_differences(name):
    op = _OP_CASES[name]
    for trial in range(3):
        a = rand((4, 4), seed=100 + trial)
        b = rand((4, 4), seed=200 + trial)
        err = finite_diff_check(lambda p: op(p[0], p[1]), [a, b], step=1e-5)
        assert err < 1e-4, f"{name} trial {trial}: rel err {err:.3g}"


def test_layer_norm_gradient():
    x = rand((3, 5), seed=10)
    gamma = rand((5,), seed=11, lo=0.5, hi=1.5)
    beta = rand((5,), seed=12)

    def f(params):
        return (T.layer_norm(params[0], params[1], params[2]) ** 2.0).mean()

    assert finite_diff_check(f, [x, gamma, beta], step=1e-5) < 1e-4


def test_median_gradient_even_and_odd():
    for n in (5, 6):
        x = rand((3, n), seed=20 + n)

        def f(params):
            return (T.median_last(params[0]) * np.arange(1.0, 4.0)).sum()

        assert finite_diff_check(f, [x], step=1e-6) < 1e-4


def test_avg_pool2_gradient_and_value():
    x = rand((2, 4, 6), seed=30)
    y = T.avg_pool2(x)
    assert y.shape == (2, 2, 3)
    np.testing.assert_allclose(y.data[0, 0, 0], x.data[0, :2, :2].mean())
    assert finite_diff_check(lambda p: (T.avg_pool2(p[0]) ** 2.0).sum(), [x]) < 1e-4


def test_avg_pool2_rejects_odd_dims():
    with pytest.raises(ShapeError):
        T.avg_pool2(Tensor(np.zeros((3, 3))))


def test_bilinear_resize_identity_and_gradient():
    x = rand((2, 5, 7), seed=31)
    np.testing.assert_array_equal(T.bilinear_resize(x, 5, 7).data, x.data)
    assert finite_diff_check(lambda p: T.bilinear_resize(p[0], 9, 4).sum(), [x]) < 1e-4


def test_gather_rows_accumulates_repeats():
    table = Tensor(np.eye(4), requires_grad=True)
    ids = np.array([[0, 2, 0]])
    out = T.gather_rows(table, ids)
    assert out.shape == (1, 3, 4)
    g = backward(out.sum()).of(table)
    np.testing.assert_allclose(g[0], 2.0 * np.ones(4))
    np.testing.assert_allclose(g[1], np.zeros(4))


def test_take_along_last_gradient():
    x = rand((3, 4), seed=32)
    ids = np.array([0, 3, 1])
    err = finite_diff_check(lambda p: T.take_along_last(p[0], ids).sum(), [x])
    assert err < 1e-8


def test_bce_with_logits_matches_reference():
    x = rand((4, 4), seed=33, lo=-5, hi=5)
    t = Tensor((stream(34, "test").uniform(size=(4, 4)) > 0.5).astype(float))
    out = T.bce_with_logits(x, t)
    p = 1.0 / (1.0 + np.exp(-x.data))
    ref = -(t.data * np.log(p) + (1 - t.data) * np.log(1 - p))
    np.testing.assert_allclose(out.data, ref, atol=1e-12)
    assert finite_diff_check(lambda q: T.bce_with_logits(q[0], t).mean(), [x]) < 1e-4


def test_bce_with_logits_stable_at_extremes():
    x = Tensor([-1e4, 1e4])
    t = Tensor([0.0, 1.0])
    out = T.bce_with_logits(x, t)
    assert np.all(np.isfinite(out.data)) and np.allclose(out.data, 0.0)


def test_matmul_batched_gradient():
    a = rand((2, 3, 4), seed=35)
    b = rand((4, 5), seed=36)
    assert finite_diff_check(lambda p: (p[0] @ p[1]).sum(), [a, b]) < 1e-4


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3)), Tensor(np.zeros((3, 2))))


# -- purity / determinism ------------------------------------------------------


def test_forward_is_pure():
    x = rand((8, 8), seed=40)
    before = x.data.copy()
    loss = (T.softmax(x @ x) * T.tanh(x)).mean()
    backward(loss)
    np.testing.assert_array_equal(x.data, before)
    loss2 = (T.softmax(x @ x) * T.tanh(x)).mean()
    assert loss.item() == loss2.item()


def test_finite_outputs_on_finite_inputs():
    x = rand((16, 16), seed=41, lo=-50, hi=50)
    chain = T.softmax(x) @ T.sigmoid(x)
    chain = T.layer_norm(chain, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    chain = T.log_softmax(chain * 30.0)
    assert np.all(np.isfinite(chain.data))


# -- seeded_init ---------------------------------------------------------------


def test_seeded_init_zeros_and_ones():
    np.testing.assert_array_equal(seeded_init([3], "zeros", 5).data, np.zeros(3))
    np.testing.assert_array_equal(seeded_init([2, 2], "ones", 5).data, np.ones((2, 2)))


def test_seeded_init_deterministic():
    a = seeded_init([4, 8], "uniform-fan-in", seed=7)
    b = seeded_init([4, 8], "uniform-fan-in", seed=7)
    np.testing.assert_array_equal(a.data, b.data)
    c = seeded_init([4, 8], "uniform-fan-in", seed=8)
    assert not np.array_equal(a.data, c.data)


def test_seeded_init_fan_in_bound():
    d_in = 24
    w = seeded_init([d_in, 64], "uniform-fan-in", seed=3)
    bound = np.sqrt(6.0 / d_in)
    assert np.all(np.abs(w.data) <= bound)


def test_seeded_init_unknown_scheme():
    with pytest.raises(ConfigError):
        seeded_init([3], "gaussian", 0)


# -- property tests -------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_random_op_chain_gradcheck(seed):
    a = Tensor(stream(seed, "prop").uniform(-1, 1, size=(3, 3)), requires_grad=True)

    def f(params):
        x = params[0]
        y = T.relu(x @ x + 0.2) + T.sigmoid(x)
        return T.layer_norm(y, Tensor(np.ones(3)), Tensor(np.zeros(3))).mean()

    assert finite_diff_check(f, [a], step=1e-5) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_softmax_shift_invariance(seed):
    x = stream(seed, "prop2").normal(size=(4, 6))
    s1 = T.softmax(Tensor(x)).data
    s2 = T.softmax(Tensor(x + 123.456)).data
    np.testing.assert_allclose(s1, s2, atol=1e-12)
