import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vitalformer import diffcore
from vitalformer.diffcore import ShapeError, Tape, TapeError, grad_check

SEEDS = range(10)


def weighted_sum(tape, out, rng):
    """Reduce ``out`` to a scalar with fixed random weights."""
    w = tape.constant(rng.standard_normal(out.shape))
    return tape.sum(tape.mul(out, w))


def away_from_zero(rng, shape, margin=0.3):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


# each builder returns (x0, f) where f(tape, leaf) builds the op under test
def case_unary(op, gen=None, **kw):
    def build(rng):
        x0 = gen(rng) if gen else rng.standard_normal((3, 4))
        return x0, lambda t, x: getattr(t, op)(x, **kw)
    return build


def case_binary(op, side, gen_other=None, gen_x=None, shape=(3, 4)):
    def build(rng):
        x0 = gen_x(rng, shape) if gen_x else rng.standard_normal(shape)
        other = gen_other(rng, shape) if gen_other else rng.standard_normal(shape)

        def f(t, x):
            c = t.constant(other)
            return getattr(t, op)(x, c) if side == 0 else getattr(t, op)(c, x)
        return x0, f
    return build


def case_linear(pos):
    def build(rng):
        parts = [rng.standard_normal((5, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)]

        def f(t, x):
            args = [t.constant(p) for p in parts]
            args[pos] = x
            return t.linear(*args)
        return parts[pos], f
    return build


def case_matmul(side):
    def build(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))

        def f(t, x):
            return t.matmul(x, t.constant(b)) if side == 0 else t.matmul(t.constant(a), x)
        return (a if side == 0 else b), f
    return build


def case_layernorm(pos):
    def build(rng):
        parts = [rng.standard_normal((3, 6)), 1 + 0.1 * rng.standard_normal(6), rng.standard_normal(6)]

        def f(t, x):
            args = [t.constant(p) for p in parts]
            args[pos] = x
            return t.layernorm(*args)
        return parts[pos], f
    return build


def case_conv(pos, stride, padding):
    def build(rng):
        parts = [rng.standard_normal((2, 5, 6, 3)), rng.standard_normal((3, 3, 3, 4)) * 0.3,
                 rng.standard_normal(4)]

        def f(t, x):
            args = [t.constant(p) for p in parts]
            args[pos] = x
            return t.conv2d(*args, stride=stride, padding=padding)
        return parts[pos], f
    return build


def case_max(rng):
    x0 = rng.permutation(12).astype(float).reshape(3, 4)  # margin 1 between entries
    return x0, lambda t, x: t.max(x)


def case_relu(rng):
    return away_from_zero(rng, (3, 4)), lambda t, x: t.relu(x)


def case_rfft(rng):
    return rng.standard_normal(10), lambda t, x: t.rfft(x, n=16)


def case_irfft(n):
    def build(rng):
        return rng.standard_normal((n // 2 + 1, 2)), lambda t, x: t.irfft(x, n=n)
    return build


def case_cmul(side):
    def build(rng):
        a, b = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))

        def f(t, x):
            return t.cmul_conj(x, t.constant(b)) if side == 0 else t.cmul_conj(t.constant(a), x)
        return (a if side == 0 else b), f
    return build


def positive(rng, shape=(3, 4)):
    return rng.uniform(0.3, 2.0, size=shape)


CASES = {
    "add_a": case_binary("add", 0),
    "add_b": case_binary("add", 1),
    "add_scalar": lambda rng: (rng.standard_normal(()), lambda t, x: t.add(x, t.constant(np.ones((3, 4))))),
    "sub_a": case_binary("sub", 0),
    "sub_b": case_binary("sub", 1),
    "mul_a": case_binary("mul", 0),
    "mul_b": case_binary("mul", 1),
    "div_a": case_binary("div", 0, gen_other=away_from_zero),
    "div_b": case_binary("div", 1, gen_x=away_from_zero),
    "scale": case_unary("scale", factor=-2.5),
    "matmul_a": case_matmul(0),
    "matmul_b": case_matmul(1),
    "linear_x": case_linear(0),
    "linear_w": case_linear(1),
    "linear_b": case_linear(2),
    "broadcast_to": lambda rng: (rng.standard_normal((3, 1)), lambda t, x: t.broadcast_to(x, shape=(2, 3, 4))),
    "sigmoid": case_unary("sigmoid"),
    "tanh": case_unary("tanh"),
    "relu": case_relu,
    "gelu": case_unary("gelu"),
    "exp": case_unary("exp"),
    "log": case_unary("log", gen=positive),
    "sqrt": case_unary("sqrt", gen=positive),
    "softmax": case_unary("softmax"),
    "layernorm_x": case_layernorm(0),
    "layernorm_g": case_layernorm(1),
    "layernorm_b": case_layernorm(2),
    "sum_axis": case_unary("sum", axis=1),
    "mean_all": case_unary("mean"),
    "mean_keep": case_unary("mean", axis=0, keepdims=True),
    "reshape": case_unary("reshape", shape=(2, 6)),
    "transpose": case_unary("transpose", axes=(1, 0)),
    "concat": lambda rng: (rng.standard_normal((2, 4)),
                           lambda t, x: t.concat(x, t.constant(np.ones((3, 4))), x, axis=0)),
    "slice": case_unary("slice", index=(slice(1, 3), slice(None, None, 2))),
    "max": case_max,
    "rfft": case_rfft,
    "irfft_even": case_irfft(16),
    "irfft_odd": case_irfft(15),
    "cmul_conj_a": case_cmul(0),
    "cmul_conj_b": case_cmul(1),
    "magsq": lambda rng: (rng.standard_normal((5, 2)), lambda t, x: t.magsq(x)),
    "conv_x_same": case_conv(0, 1, "same"),
    "conv_w_same": case_conv(1, 1, "same"),
    "conv_b_same": case_conv(2, 1, "same"),
    "conv_x_valid_s2": case_conv(0, 2, "valid"),
    "conv_w_same_s2": case_conv(1, 2, "same"),
    "avgpool2": lambda rng: (rng.standard_normal((1, 5, 4, 2)), lambda t, x: t.avgpool2(x)),
}


@pytest.mark.parametrize("name", sorted(CASES))
def test_op_gradients_match_finite_differences(name):
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        x0, f = CASES[name](rng)

        def loss(tape, x):
            out = f(tape, x)
            return out if out.shape == () else weighted_sum(tape, out, np.random.default_rng(1000 + seed))

        rep = grad_check(loss, x0, eps=1e-6, tol=1e-4)
        assert rep.passed, (name, seed, rep)


def test_wrong_backward_rule_is_caught(monkeypatch):
    def bad_square(xs):
        x = xs[0]
        return x * x, lambda g: [3.0 * x * g]  # should be 2x

    monkeypatch.setitem(diffcore._OPS, "bad_square", bad_square)
    rep = grad_check(lambda t, x: t.sum(t.bad_square(x)), np.array([1.0, 2.0]))
    assert not rep.passed
    assert rep.max_rel_err > 0.1


def test_grad_check_sum_of_squares():
    rep = grad_check(lambda t, x: t.sum(t.mul(x, x)), np.array([1.0, 2.0]), eps=1e-5)
    assert rep.passed and rep.max_rel_err < 1e-6


def test_grad_check_rejects_bad_eps():
    with pytest.raises(ValueError):
        grad_check(lambda t, x: t.sum(x), np.ones(2), eps=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_nonfinite_coordinate():
    # log(x) is finite at the base point but not after the -eps step at 0.5e-6
    with pytest.raises(FloatingPointError, match=r"\(0,\)"):
        grad_check(lambda t, x: t.sum(t.log(x)), np.array([5e-7, 1.0]), eps=1e-6)


def test_record_examples():
    t = Tape()
    a, b = t.leaf([1.0, 2.0]), t.leaf([3.0, 4.0])
    assert np.array_equal(t.add(a, b).values, [4.0, 6.0])
    x = t.leaf([[5.0], [7.0]])
    assert np.array_equal(t.matmul(t.constant(np.eye(2)), x).values, [[5.0], [7.0]])
    z = t.rfft(t.leaf(np.ones(4)))
    assert np.allclose(z.values, [[4, 0], [0, 0], [0, 0]])


def test_backward_examples():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    t.backward(t.sum(t.mul(x, x)))
    assert np.array_equal(x.grad, [2.0, 4.0])

    t = Tape()
    x = t.leaf([0.0])
    t.backward(t.mean(t.sigmoid(x)))
    assert x.grad[0] == pytest.approx(0.25, abs=1e-15)

    t = Tape()
    x = t.leaf([1.0, 2.0])
    _ = t.mul(x, x)
    c = t.leaf(3.0)
    t.backward(c)
    assert not x.grad.any()


def test_backward_errors():
    t = Tape()
    x = t.leaf([1.0, 2.0])
    with pytest.raises(ShapeError):
        t.backward(x)
    loss = t.sum(x)
    t.backward(loss)
    with pytest.raises(TapeError):
        t.backward(loss)
    with pytest.raises(TapeError):
        t.sum(x)


def test_shape_error_names_op_and_shapes():
    t = Tape()
    with pytest.raises(ShapeError) as ei:
        t.add(t.leaf(np.ones(2)), t.leaf(np.ones(3)))
    assert "add" in str(ei.value) and "(2,)" in str(ei.value) and "(3,)" in str(ei.value)
    with pytest.raises(ShapeError, match="matmul"):
        t.matmul(t.leaf(np.ones((2, 3))), t.leaf(np.ones((2, 3))))


def test_inputs_from_other_tape_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(TapeError):
        t1.add(t1.leaf(1.0), t2.leaf(1.0))


def test_grad_starts_zero_and_matches_shape():
    t = Tape()
    x = t.leaf(np.ones((2, 3)))
    y = t.tanh(x)
    assert y.grad.shape == y.values.shape and not y.grad.any()


def test_max_ties_go_to_lowest_index():
    t = Tape()
    x = t.leaf([1.0, 3.0, 3.0])
    m, k = t.max_with_argmax(x)
    t.backward(m)
    assert k == 1
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("n", [4, 64, 300, 1000])
def test_fft_round_trip(n):
    x = np.random.default_rng(n).standard_normal(n)
    t = Tape()
    back = t.irfft(t.rfft(t.leaf(x)), n=n)
    assert np.max(np.abs(back.values - x)) < 1e-10


@pytest.mark.parametrize("n", [7, 16, 33])
def test_rfft_backward_is_adjoint(n):
    rng = np.random.default_rng(n)
    x = rng.standard_normal(n)
    g = rng.standard_normal((n // 2 + 1, 2))
    t = Tape()
    leaf = t.leaf(x)
    z = t.rfft(leaf)
    t.backward(t.sum(t.mul(z, t.constant(g))))
    assert abs(np.sum(z.values * g) - np.dot(x, leaf.grad)) < 1e-9


@pytest.mark.parametrize("n", [8, 15])
def test_irfft_backward_is_adjoint(n):
    rng = np.random.default_rng(n)
    z = rng.standard_normal((n // 2 + 1, 2))
    z[0, 1] = 0.0
    if n % 2 == 0:
        z[-1, 1] = 0.0
    g = rng.standard_normal(n)
    t = Tape()
    leaf = t.leaf(z)
    y = t.irfft(leaf, n=n)
    t.backward(t.sum(t.mul(y, t.constant(g))))
    assert abs(np.dot(y.values, g) - np.sum(z * leaf.grad)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-1e3, 1e3)))
def test_fft_round_trip_property(x):
    t = Tape()
    back = t.irfft(t.rfft(t.leaf(x)), n=x.size)
    assert np.allclose(back.values, x, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-30, 30)))
def test_softmax_rows_sum_to_one(x):
    t = Tape()
    s = t.softmax(t.leaf(x)).values
    assert np.allclose(s.sum(axis=-1), 1.0, atol=1e-12)


def test_conv_same_stride2_shape():
    t = Tape()
    out = t.conv2d(t.leaf(np.ones((1, 5, 6, 2))), t.leaf(np.ones((3, 3, 2, 4))), t.leaf(np.zeros(4)),
                   stride=2, padding="same")
    assert out.shape == (1, 3, 3, 4)
    with pytest.raises(ValueError):
        t.conv2d(t.leaf(np.ones((1, 5, 6, 2))), t.leaf(np.ones((3, 3, 2, 4))), t.leaf(np.zeros(4)), stride=3)
