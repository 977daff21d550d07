import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from roslu import tensor as T
from roslu.errors import ConfigError, GradientError, ShapeError
from roslu.rng import Rng

from conftest import max_rel_err, numeric_grad

RNG = np.random.default_rng(1234)


def check_kernel(build, *shapes, tol=1e-4):
    """Compare backward() of sum(w * build(*inputs)) against central differences."""
    inputs = [T.parameter(RNG.normal(size=s)) for s in shapes]
    out_shape = build(*inputs).shape
    w = RNG.normal(size=out_shape)

    def f():
        with T.no_grad():
            return float(np.sum(w * build(*inputs).values))

    loss = T.sum(T.mul(build(*inputs), T.Tensor(w)))
    T.backward(loss)
    for p in inputs:
        num = numeric_grad(f, p.values)
        assert max_rel_err(p.grad, num) < tol


# ----------------------------------------------------------- forward values

def test_softmax_uniform():
    out = T.softmax(T.Tensor([0.0, 0.0, 0.0])).values
    assert np.allclose(out, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_layer_norm_constant_vector_is_zero():
    x = T.Tensor(np.full(6, 3.7))
    out = T.layer_norm(x, T.Tensor(np.ones(6)), T.Tensor(np.zeros(6))).values
    assert np.max(np.abs(out)) < 1e-6


def test_matmul_identity():
    a = RNG.normal(size=(3, 3))
    assert np.array_equal(T.matmul(T.Tensor(np.eye(3)), T.Tensor(a)).values, a)


def test_shape_error_names_kernel_and_shapes():
    with pytest.raises(ShapeError) as exc:
        T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4, 2))))
    assert "matmul" in str(exc.value) and "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)
    with pytest.raises(ShapeError, match="add"):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((4,))))


def test_checked_mode_flags_non_finite():
    T.set_checked(True)
    try:
        with pytest.raises(GradientError), np.errstate(over="ignore"):
            T.scale(T.Tensor([1e308]), 1e10)
    finally:
        T.set_checked(False)


def test_float32_switch():
    T.set_default_dtype(np.float32)
    try:
        assert T.Tensor([1.0]).values.dtype == np.float32
    finally:
        T.set_default_dtype(np.float64)
    assert T.Tensor([1.0]).values.dtype == np.float64


# --------------------------------------------------------- gradient checks

@pytest.mark.parametrize("name,build,shapes", [
    ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)]),
    ("batched_matmul", lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 1)]),
    ("mul", lambda a, b: a * b, [(2, 3), (1, 3)]),
    ("scale", lambda a: T.scale(a, -2.5), [(5,)]),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("slice", lambda a: a[:, 1:3], [(3, 4)]),
    ("index_rows", lambda a: a[:, 0, :], [(2, 3, 4)]),
    ("reshape_transpose", lambda a: T.transpose(T.reshape(a, (2, 3, 2)), (2, 0, 1)), [(3, 4)]),
    ("softmax", T.softmax, [(3, 5)]),
    ("log_softmax", T.log_softmax, [(3, 5)]),
    ("layer_norm", lambda a, g, b: T.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    ("relu", T.relu, [(4, 4)]),
    ("tanh", T.tanh, [(4,)]),
    ("sigmoid", T.sigmoid, [(4,)]),
    ("softplus", T.softplus, [(6,)]),
    ("sum_axis", lambda a: T.sum(a, axis=1), [(3, 4)]),
    ("mean", lambda a: T.mean(a, axis=0), [(3, 4)]),
    ("masked_fill", lambda a: T.masked_fill(a, np.array([[True, False, False], [False, True, False]]), -7.0),
     [(2, 3)]),
])
def test_kernel_gradients(name, build, shapes):
    check_kernel(build, *shapes)


def test_embedding_gradient_with_repeated_ids():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    check_kernel(lambda t: T.embedding(t, ids), (4, 3))


def test_cross_entropy_gradient_and_identity():
    targets = np.array([1, 0, 3])
    mask = np.array([1.0, 0.0, 1.0])
    check_kernel(lambda z: T.cross_entropy(z, targets, mask=mask, reduction="none"), (3, 4))
    check_kernel(lambda z: T.cross_entropy(z, targets, reduction="mean"), (3, 4))
    logits = T.parameter(RNG.normal(size=(1, 5)))
    T.backward(T.cross_entropy(logits, np.array([2])))
    p = np.exp(logits.values) / np.exp(logits.values).sum()
    onehot = np.eye(5)[[2]]
    assert np.allclose(logits.grad, p - onehot, atol=1e-14)


def test_dropout_gradient_uses_same_mask():
    rng = Rng(5)
    check_kernel(lambda a: T.dropout(a, 0.3, rng.substream(0)), (4, 5))


# ----------------------------------------------------------- grad_reverse

def test_grad_reverse_forward_is_identity():
    x = T.parameter([1.5, -2.0])
    assert np.array_equal(T.grad_reverse(x, 1.0).values, [1.5, -2.0])


@pytest.mark.parametrize("lam,expected", [(1.0, [-0.3, -0.7]), (0.0, [0.0, 0.0]), (0.5, [-0.15, -0.35])])
def test_grad_reverse_backward(lam, expected):
    x = T.parameter([1.5, -2.0])
    upstream = T.Tensor([0.3, 0.7])
    T.backward(T.sum(T.mul(T.grad_reverse(x, lam), upstream)))
    assert np.allclose(x.grad, expected, atol=0, rtol=1e-15)


def test_grad_reverse_rejects_negative_lambda():
    with pytest.raises(ConfigError):
        T.grad_reverse(T.parameter([1.0]), -0.1)


# --------------------------------------------------------------- backward

def test_square_gradient():
    x = T.parameter(3.0)
    T.backward(x * x)
    assert x.grad == 6.0


def test_double_backward_is_an_error():
    x = T.parameter(2.0)
    loss = x * x
    T.backward(loss)
    with pytest.raises(GradientError):
        T.backward(loss)
    with pytest.raises(GradientError, match="zero_grad"):
        T.backward(x * x)
    T.zero_grad([x])
    T.backward(x * x)
    assert x.grad == 4.0


def test_unreachable_parameter_has_no_gradient():
    a, b = T.parameter([1.0, 2.0]), T.parameter([3.0])
    T.backward(T.sum(a * a))
    assert b.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        T.backward(T.parameter([1.0, 2.0]) * 2.0)


def test_shared_node_visited_once():
    x = T.parameter(2.0)
    y = x * x
    T.backward(y * y + y)  # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == 4 * 8 + 4


# ------------------------------------------------------------------- sgd

def test_sgd_step_basic():
    w = T.parameter(1.0)
    w.grad = np.asarray(0.5)
    T.sgd_step([w], 0.1)
    assert w.values == pytest.approx(0.95, abs=1e-15)


def test_sgd_tiny_lr_leaves_parameters():
    w = T.parameter([1.0, -2.0])
    w.grad = np.array([0.5, 0.25])
    T.sgd_step([w], 1e-300)
    assert np.array_equal(w.values, [1.0, -2.0])


def test_sgd_aborts_on_nan():
    a, b = T.parameter([1.0]), T.parameter([2.0])
    a.grad, b.grad = np.array([0.1]), np.array([np.nan])
    with pytest.raises(GradientError):
        T.sgd_step([a, b], 0.1)
    assert a.values[0] == 1.0


def test_sgd_rejects_non_positive_lr():
    with pytest.raises(ConfigError):
        T.sgd_step([], 0.0)


def test_adversarial_update_is_negated_by_reversal():
    """One SGD step on an adversarial-only loss, with and without reversal."""
    rng = np.random.default_rng(0)
    enc0, dis0 = rng.normal(size=(4, 3)), rng.normal(size=(3,))
    x = rng.normal(size=(5, 4))
    updates = []
    for reverse in (False, True):
        enc, dis = T.parameter(enc0.copy()), T.parameter(dis0.copy())
        h = T.tanh(T.Tensor(x) @ enc)
        if reverse:
            h = T.grad_reverse(h, 1.0)
        loss = T.sum(T.softplus(h @ T.reshape(dis, (3, 1))))
        T.backward(loss)
        T.sgd_step([enc, dis], 0.01)
        updates.append(enc.values - enc0)
    assert np.max(np.abs(updates[0] + updates[1])) <= 1e-12


# ------------------------------------------------------------- properties

finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = T.softmax(T.Tensor(x)).values
    assert np.all(np.abs(out.sum(axis=-1) - 1.0) < 1e-9)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=finite), st.data())
def test_cross_entropy_non_negative(x, data):
    t = data.draw(arrays(np.int64, (x.shape[0],), elements=st.integers(0, x.shape[1] - 1)))
    assert np.all(T.cross_entropy(T.Tensor(x), t, reduction="none").values >= 0)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 4), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_grl_sandwich_property(lam, x0):
    """grads below grad_reverse(., lam) equal -lam times the un-reversed grads."""
    w0 = np.linspace(-1, 1, 8).reshape(4, 2)
    grads = []
    for rev in (False, True):
        w = T.parameter(w0.copy())
        h = T.tanh(T.Tensor(x0) @ w)
        if rev:
            h = T.grad_reverse(h, lam)
        T.backward(T.sum(T.softplus(h)))
        grads.append(w.grad)
    assert np.max(np.abs(grads[1] + lam * grads[0])) <= 1e-12


def test_determinism_bit_identical():
    def run():
        rng = Rng(9)
        w = T.parameter(rng.substream(0).random((4, 4)))
        x = T.Tensor(rng.substream(1).random((3, 4)))
        out = T.dropout(T.softmax(x @ w), 0.5, rng.substream(2))
        T.backward(T.sum(out * out))
        return out.values.tobytes(), w.grad.tobytes()
    assert run() == run()
