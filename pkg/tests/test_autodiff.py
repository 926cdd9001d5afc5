import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetmeta import autodiff as ad
from hetmeta.autodiff import ShapeError, Tape, Tensor
from hetmeta.harness.gradcheck import central_difference, rel_error


def grad_of(fn, *values, composite=False):
    leaves = [Tensor(v) for v in values]
    with Tape() as tape:
        tape.watch(*leaves)
        y = fn(*leaves)
    if composite:
        with ad.composite_backward():
            return [g.data for g in tape.gradient(y, leaves)]
    return [g.data for g in tape.gradient(y, leaves)]


def fd(fn, *values):
    named = {str(i): np.array(v, dtype=float) for i, v in enumerate(values)}
    g = central_difference(lambda d: fn(*[Tensor(d[str(i)]) for i in range(len(values))]).item(), named)
    return [g[str(i)] for i in range(len(values))]


# --- forward examples -------------------------------------------------------


def test_matmul_identity():
    out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_sigmoid_zero():
    assert ad.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_softmax_symmetric():
    np.testing.assert_allclose(ad.softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_sigmoid_extreme_values_are_finite():
    out = ad.sigmoid(Tensor([-1000.0, 1000.0])).data
    np.testing.assert_array_equal(out, [0.0, 1.0])


@pytest.mark.parametrize(
    "op, a, b",
    [
        (ad.add, (2, 3), (3, 2)),
        (ad.mul, (2, 3), (2,)),
        (ad.matmul, (2, 3), (2, 3)),
        (ad.sub, (4,), (3,)),
    ],
)
def test_shape_mismatch_names_primitive_and_shapes(op, a, b):
    with pytest.raises(ShapeError) as e:
        op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
    msg = str(e.value)
    assert op.__name__.rstrip("_") in msg and str(a) in msg and str(b) in msg


def test_leading_broadcast_only():
    out = ad.add(Tensor(np.ones((2, 3))), Tensor(np.arange(3.0)))
    np.testing.assert_array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 1))))
    np.testing.assert_array_equal(ad.broadcast_to(Tensor(np.ones((2, 1))), (2, 3)).data, np.ones((2, 3)))


def test_primitive_forward_by_name():
    out = ad.primitive_forward("concat", [Tensor([1.0]), Tensor([2.0, 3.0])], axis=0)
    np.testing.assert_array_equal(out.data, [1, 2, 3])
    with pytest.raises(ValueError):
        ad.primitive_forward("nope", [])


# --- cross-entropy ------------------------------------------------------------


def test_cross_entropy_uniform():
    assert ad.cross_entropy_loss(Tensor(np.zeros(5)), 2).item() == pytest.approx(math.log(5), abs=1e-15)


def test_cross_entropy_confident():
    # -log(sigmoid(10)) = log(1 + e^-10)
    assert ad.cross_entropy_loss(Tensor([10.0, 0.0]), 0).item() == pytest.approx(math.log1p(math.exp(-10)), rel=1e-12)
    assert ad.cross_entropy_loss(Tensor([10.0, 0.0]), 0).item() == pytest.approx(4.54e-5, rel=1e-3)


def test_cross_entropy_gradient_at_uniform():
    (g,) = grad_of(lambda x: ad.cross_entropy_loss(x, 3), np.zeros(5))
    np.testing.assert_allclose(g, np.full(5, 0.2) - np.eye(5)[3], atol=1e-15)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        ad.cross_entropy_loss(Tensor(np.zeros(3)), 3)
    with pytest.raises(ValueError):
        ad.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, -1])


def test_cross_entropy_batch_is_mean():
    logits = np.random.default_rng(0).standard_normal((4, 3))
    y = np.array([0, 2, 1, 1])
    per = [ad.cross_entropy_loss(Tensor(logits[i]), y[i]).item() for i in range(4)]
    assert ad.cross_entropy_loss(Tensor(logits), y).item() == pytest.approx(np.mean(per), rel=1e-14)


# --- backward -------------------------------------------------------------------


def test_square_gradient():
    (g,) = grad_of(lambda x: ad.mul(x, x), 3.0)
    assert g == 6.0


def test_sigmoid_gradient_at_zero():
    (g,) = grad_of(lambda x: ad.sigmoid(x), 0.0)
    assert g == 0.25


def test_output_not_on_tape_rejected():
    x = Tensor(1.0)
    with Tape() as tape:
        tape.watch(x)
    y = ad.mul(x, x)  # recorded after the tape closed
    with pytest.raises(ValueError):
        ad.backward(tape, y)


def test_non_scalar_needs_seed():
    x = Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x)
        y = ad.mul(x, Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ShapeError):
        ad.backward(tape, y)
    with pytest.raises(ShapeError):
        ad.backward(tape, y, seed=np.ones(2))
    gm = ad.backward(tape, y, seed=np.array([1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(gm[x].data, [1, 0, 6])


def test_disconnected_leaf_gets_exact_zeros():
    x, z = Tensor(np.ones((2, 2))), Tensor(np.ones(3))
    with Tape() as tape:
        tape.watch(x, z)
        y = ad.sum_(ad.tanh(x))
    gm = ad.backward(tape, y)
    assert not gm.reached(z)
    assert gm[z].shape == (3,) and not np.any(gm[z].data)
    with pytest.raises(KeyError):
        gm[Tensor(0.0)]


def test_backward_twice_is_bit_identical():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 4)))
    w = Tensor(rng.standard_normal((4, 2)))
    with Tape() as tape:
        tape.watch(x, w)
        y = ad.sum_(ad.tanh(ad.matmul(x, w)))
    for composite in (False, True):
        if composite:
            with ad.composite_backward():
                a, b = ad.backward(tape, y), ad.backward(tape, y)
        else:
            a, b = ad.backward(tape, y), ad.backward(tape, y)
        for leaf in (x, w):
            assert a[leaf].data.tobytes() == b[leaf].data.tobytes()


def test_tapes_exit_lifo():
    a, b = Tape(), Tape()
    a.__enter__()
    b.__enter__()
    with pytest.raises(RuntimeError):
        a.__exit__(None, None, None)
    b.__exit__(None, None, None)
    a.__exit__(None, None, None)


def test_untracked_constants_get_no_entries():
    x = Tensor(2.0)
    with Tape() as tape:
        ad.mul(Tensor(1.0), Tensor(3.0))
        tape.watch(x)
        ad.mul(x, Tensor(3.0))
    assert len(tape.entries) == 1


def test_nested_tape_parent():
    with Tape() as outer:
        with Tape() as inner:
            assert inner.parent is outer
    assert outer.parent is None


def test_second_order_tanh_square():
    """f(w) = tanh(x w)^2; d/dw of df/dw against differences of the first gradient."""
    x = 0.7
    w0 = 0.3

    def first_grad(w_val):
        w = Tensor(w_val)
        with Tape() as t:
            t.watch(w)
            y = ad.mul(ad.tanh(ad.mul(Tensor(x), w)), ad.tanh(ad.mul(Tensor(x), w)))
        return t.gradient(y, [w])[0]

    w = Tensor(w0)
    with Tape() as outer:
        outer.watch(w)
        with Tape() as inner:
            inner.watch(w)
            y = ad.mul(ad.tanh(ad.mul(Tensor(x), w)), ad.tanh(ad.mul(Tensor(x), w)))
        (g,) = inner.gradient(y, [w])
    (h,) = outer.gradient(g, [w])
    h_fd = (first_grad(w0 + 1e-6).item() - first_grad(w0 - 1e-6).item()) / 2e-6
    assert rel_error(h.data, h_fd) < 1e-4
    # closed form: 2x^2 (1 - t^2)(1 - 3 t^2)
    t = math.tanh(x * w0)
    assert h.item() == pytest.approx(2 * x * x * (1 - t * t) * (1 - 3 * t * t), rel=1e-12)


def test_third_order_polynomial():
    w = Tensor(1.5)
    with Tape() as t3:
        t3.watch(w)
        with Tape() as t2:
            t2.watch(w)
            with Tape() as t1:
                t1.watch(w)
                y = ad.mul(ad.mul(w, w), ad.mul(w, w))  # w^4
            (g1,) = t1.gradient(y, [w])
        (g2,) = t2.gradient(g1, [w])
    (g3,) = t3.gradient(g2, [w])
    assert g1.item() == pytest.approx(4 * 1.5**3)
    assert g2.item() == pytest.approx(12 * 1.5**2)
    assert g3.item() == pytest.approx(24 * 1.5)


# --- property: random compositions match finite differences -------------------

UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": lambda t: ad.exp(ad.mul(t, Tensor(0.3))),
    "softmax": ad.softmax,
    "log_softmax": ad.log_softmax,
    "square": lambda t: ad.mul(t, t),
    "transpose2": lambda t: ad.transpose(ad.transpose(t)),
    "logsig": lambda t: ad.log(ad.sigmoid(t)),
}


@settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 4),
    cols=st.integers(1, 4),
    ops=st.lists(st.sampled_from(sorted(UNARY)), min_size=1, max_size=4),
    seed=st.integers(0, 2**16),
    composite=st.booleans(),
)
def test_random_composition_matches_fd(rows, cols, ops, seed, composite):
    rng = np.random.default_rng(seed)
    x0 = rng.uniform(-1, 1, size=(rows, cols))
    w0 = rng.uniform(-1, 1, size=(cols, 3))
    proj = rng.standard_normal((rows, 3))

    def f(x, w):
        h = x
        for name in ops:
            h = UNARY[name](h)
        return ad.sum_(ad.mul(ad.matmul(h, w), Tensor(proj)))

    analytic = grad_of(f, x0, w0, composite=composite)
    numeric = fd(f, x0, w0)
    for a, n in zip(analytic, numeric):
        assert rel_error(a, n) < 1e-5


@settings(max_examples=20, deadline=None)
@given(shape=st.lists(st.integers(1, 3), min_size=1, max_size=3), seed=st.integers(0, 2**16))
def test_backends_agree(shape, seed):
    rng = np.random.default_rng(seed)
    x0 = rng.standard_normal(shape)
    axis = int(rng.integers(0, len(shape)))

    def f(x):
        s = ad.sum_(ad.tanh(x), axis=axis, keepdims=True)
        return ad.sum_(ad.mul(ad.broadcast_to(s, tuple(shape)), ad.sigmoid(x)))

    (a,) = grad_of(f, x0)
    (b,) = grad_of(f, x0, composite=True)
    np.testing.assert_allclose(a, b, rtol=1e-13, atol=1e-15)


def test_slice_and_stack_gradients():
    x0 = np.arange(12.0).reshape(3, 4) / 10

    def f(x):
        parts = ad.stack([x[0, 1:3], x[2, ::2]], axis=0)
        return ad.sum_(ad.mul(parts, parts))

    for composite in (False, True):
        (g,) = grad_of(f, x0, composite=composite)
        want = np.zeros((3, 4))
        want[0, 1:3] = 2 * x0[0, 1:3]
        want[2, ::2] = 2 * x0[2, ::2]
        np.testing.assert_allclose(g, want, atol=1e-15)


def test_slice_rejects_fancy_index():
    with pytest.raises(TypeError):
        ad.slice_(Tensor(np.zeros(3)), [0, 1])
