import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xformer.core import (
    GradientError,
    GradTape,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tensor,
    backward,
    default_dtype,
    finite_diff_check,
    no_grad,
    ops,
    record_shapes,
)
from xformer.core.ops import GELU_COEF


def f64(a):
    return Parameter(np.asarray(a, dtype=np.float64))


# -- tensors --------------------------------------------------------------------


def test_default_dtype_is_float32():
    assert Tensor([1, 2]).dtype == np.float32
    with default_dtype(np.float64):
        assert Tensor([1, 2]).dtype == np.float64
    assert Tensor([1, 2]).dtype == np.float32


def test_rejects_empty_dims():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError, match="mul"):
        ops.mul(Tensor([1e30]), Tensor([1e30]))


# -- matmul -----------------------------------------------------------------------


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ops.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_values():
    out = ops.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_zeros():
    out = ops.matmul(Tensor(np.zeros((2, 3))), Tensor(np.random.default_rng(0).normal(size=(3, 4))))
    np.testing.assert_array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(1, 16), st.integers(0, 2**32 - 1))
def test_matmul_associative(m, k, p, q, seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.uniform(-1, 1, s), dtype=np.float64) for s in ((m, k), (k, p), (p, q)))
    left = ops.matmul(ops.matmul(a, b), c).data
    right = ops.matmul(a, ops.matmul(b, c)).data
    assert np.max(np.abs(left - right)) < 1e-8


# -- softmax ----------------------------------------------------------------------


def test_softmax_constant_row_uniform():
    out = ops.softmax_rows(Tensor(np.full((2, 5), 3.0)))
    np.testing.assert_allclose(out.data, 0.2, atol=1e-7)


def test_softmax_closed_form():
    out = ops.softmax_rows(Tensor([[0.0, math.log(3.0)]], dtype=np.float64))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 12), st.floats(-50, 50), st.integers(0, 2**32 - 1))
def test_softmax_rows_sum_to_one_and_shift_invariant(m, p, c, seed):
    x = np.random.default_rng(seed).normal(scale=5, size=(m, p))
    s = ops.softmax_rows(Tensor(x, dtype=np.float64)).data
    assert np.all((s >= 0) & (s <= 1))
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-6)
    shifted = ops.softmax_rows(Tensor(x + c, dtype=np.float64)).data
    np.testing.assert_allclose(shifted, s, atol=1e-6)


def test_softmax_stable_for_large_logits():
    out = ops.softmax_rows(Tensor([[1000.0, 1000.0]]))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]])


# -- l2 normalize -----------------------------------------------------------------


def test_l2_normalize_examples():
    np.testing.assert_allclose(ops.l2_normalize_rows(Tensor([[3.0, 4.0]])).data, [[0.6, 0.8]], atol=1e-7)
    np.testing.assert_array_equal(ops.l2_normalize_rows(Tensor([[0.0, 0.0]])).data, [[0.0, 0.0]])
    unit = np.eye(3)
    np.testing.assert_allclose(ops.l2_normalize_rows(Tensor(unit)).data, unit, atol=1e-6)


def test_l2_normalize_requires_positive_eps():
    with pytest.raises(ValueError):
        ops.l2_normalize_rows(Tensor([[1.0]]), eps=0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_l2_normalize_row_norms(n, d, seed):
    x = np.random.default_rng(seed).normal(size=(n, d))
    x[0] = 0.0
    norms = np.linalg.norm(ops.l2_normalize_rows(Tensor(x, dtype=np.float64)).data, axis=-1)
    assert norms[0] == 0.0
    np.testing.assert_allclose(norms[1:], 1.0, atol=1e-6)


# -- layer norm and activations ----------------------------------------------------


def test_layer_norm_examples():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_array_equal(ops.layer_norm(Tensor([[5.0, 5.0]]), one, zero).data, [[0.0, 0.0]])
    out = ops.layer_norm(Tensor([[1.0, 3.0]], dtype=np.float64), one, zero, eps=1e-12)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-9)


def test_layer_norm_centers_rows():
    x = Tensor(np.random.default_rng(0).normal(size=(6, 16)), dtype=np.float64)
    out = ops.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16)))
    assert np.max(np.abs(out.data.mean(axis=-1))) <= 1e-6


def test_activation_points():
    z = Tensor([0.0])
    assert ops.silu(z).item() == 0.0
    assert ops.sigmoid(z).item() == 0.5
    assert ops.gelu(z).item() == 0.0
    np.testing.assert_array_equal(ops.relu(Tensor([-3.0, 3.0])).data, [0.0, 3.0])
    with pytest.raises(ValueError):
        ops.activation(z, "swish")


def test_gelu_uses_tanh_approximation():
    assert GELU_COEF == pytest.approx(0.7978845608, abs=1e-10)
    x = np.linspace(-4, 4, 17)
    ref = 0.5 * x * (1 + np.tanh(GELU_COEF * (x + 0.044715 * x**3)))
    np.testing.assert_allclose(ops.gelu(Tensor(x, dtype=np.float64)).data, ref, atol=1e-12)


# -- convolution --------------------------------------------------------------------


def test_pointwise_conv_is_per_pixel_linear():
    rng = np.random.default_rng(0)
    x, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(6, 3, 1, 1))
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), "pointwise")
    np.testing.assert_allclose(out.data, np.einsum("oc,chw->ohw", w[:, :, 0, 0], x), atol=1e-12)


def test_depthwise_window_coverage():
    x = Tensor(np.full((2, 5, 5), 2.0))
    out = ops.conv2d(x, Tensor(np.ones((2, 1, 3, 3))), "depthwise", 1, 1).data
    assert out[0, 2, 2] == 18.0 and out[1, 0, 0] == 8.0 and out[0, 0, 2] == 12.0


def test_standard_conv_matches_loop_oracle():
    rng = np.random.default_rng(1)
    x, w = rng.normal(size=(3, 6, 7)), rng.normal(size=(4, 3, 3, 3))
    out = ops.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), "standard", 2, 1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros((4, 3, 4))
    for o in range(4):
        for i in range(3):
            for j in range(4):
                ref[o, i, j] = np.sum(xp[:, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_stride_two_output_size():
    out = ops.conv2d(Tensor(np.zeros((3, 224, 224))), Tensor(np.zeros((16, 3, 3, 3))), "standard", 2, 1)
    assert out.shape == (16, 112, 112)


def test_conv_errors():
    x = Tensor(np.zeros((3, 8, 8)))
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((3, 3, 3, 3))), "depthwise", 1, 1)
    with pytest.raises(ShapeError):
        ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), "pointwise")
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((3, 2, 2))), Tensor(np.zeros((4, 3, 5, 5))), "standard", 1, 0)
    with pytest.raises(ValueError):
        ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3))), "grouped")


# -- differentiation ----------------------------------------------------------------


def test_product_rule():
    x, y = f64(2.0), f64(3.0)
    with GradTape():
        loss = ops.mul(x, y)
    backward(loss)
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_errors():
    x = f64([1.0, 2.0])
    with GradTape():
        y = ops.mul(x, x)
    with pytest.raises(GradientError):
        backward(y)
    with pytest.raises(GradientError):
        backward(ops.sum(ops.mul(x, x)))


def test_gradients_accumulate_over_reuse():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    x = f64(a)
    with GradTape():
        loss = ops.sum(ops.matmul(x, x))
    backward(loss)
    # duplicated-leaf construction: two independent leaves with the same value
    x1, x2 = f64(a), f64(a)
    with GradTape():
        loss2 = ops.sum(ops.matmul(x1, x2))
    backward(loss2)
    np.testing.assert_allclose(x.grad, x1.grad + x2.grad, atol=1e-12)


def test_leaf_grads_accumulate_across_backward_calls():
    x = f64([1.0, 2.0])
    for _ in range(2):
        with GradTape():
            loss = ops.sum(ops.mul(x, x))
        backward(loss)
    np.testing.assert_allclose(x.grad, 2 * 2 * x.data)


def test_tape_releases_graph_after_backward():
    x = f64([1.0])
    with GradTape() as tape:
        loss = ops.sum(ops.mul(x, x))
    tape.backward(loss)
    assert tape.nodes == [] and loss._ctx is None
    with pytest.raises(GradientError):
        backward(loss)


def test_no_grad_records_nothing():
    x = f64([1.0])
    with GradTape() as tape, no_grad():
        ops.mul(x, x)
    assert tape.nodes == []


def test_record_shapes_probe():
    with record_shapes() as log:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
    assert log == [("matmul", (2, 4))]


def test_finite_diff_sum_of_squares():
    x = f64(np.random.default_rng(0).normal(size=(4, 3)))
    assert finite_diff_check(lambda: ops.sum(ops.mul(x, x)), x) < 1e-7


def test_finite_diff_constant():
    x = f64([1.0, 2.0])
    assert finite_diff_check(lambda: Tensor(3.0, dtype=np.float64), x) == 0.0


def test_finite_diff_preconditions():
    x = f64([1.0, 2.0])
    with pytest.raises(GradientError):
        finite_diff_check(lambda: ops.mul(x, x), x)
    with pytest.raises(TypeError):
        finite_diff_check(lambda: ops.sum(x), Parameter(np.ones(2, dtype=np.float32)))


def test_finite_diff_matmul_and_composite():
    rng = np.random.default_rng(3)
    a, b = f64(rng.normal(size=(3, 4))), f64(rng.normal(size=(4, 2)))
    assert finite_diff_check(lambda: ops.sum(ops.matmul(a, b)), a) < 1e-4
    x = f64(rng.normal(size=(5, 6)))
    assert finite_diff_check(lambda: ops.sum(ops.l2_normalize_rows(ops.softmax_rows(x))), x) < 1e-4


def _primitive_cases(rng):
    def weighted(out_fn, shape):
        w = Tensor(rng.normal(size=shape), dtype=np.float64)
        return lambda: ops.sum(ops.mul(out_fn(), w))

    x = f64(rng.normal(size=(2, 3, 6, 6)))
    g, b = f64(rng.uniform(0.5, 1.5, 3)), f64(rng.normal(size=3))
    kernel = f64(rng.normal(size=(4, 3, 3, 3)))
    dw = f64(rng.normal(size=(3, 1, 3, 3)))
    pw = f64(rng.normal(size=(4, 3, 1, 1)))
    t = f64(rng.normal(size=(4, 5)))
    lg, lb = f64(rng.uniform(0.5, 1.5, 5)), f64(rng.normal(size=5))
    m = f64(rng.normal(size=(5, 3)))
    cases = {
        "add": (weighted(lambda: ops.add(t, lb), (4, 5)), [t, lb]),
        "sub": (weighted(lambda: ops.sub(t, lb), (4, 5)), [t, lb]),
        "mul": (weighted(lambda: ops.mul(t, lg), (4, 5)), [t, lg]),
        "matmul": (weighted(lambda: ops.matmul(t, m), (4, 3)), [t, m]),
        "permute": (weighted(lambda: ops.permute(x, (1, 0, 3, 2)), (3, 2, 6, 6)), [x]),
        "reshape": (weighted(lambda: ops.reshape(t, (2, 10)), (2, 10)), [t]),
        "mean": (weighted(lambda: ops.mean(x, (-2, -1)), (2, 3)), [x]),
        "pad_crop": (weighted(lambda: ops.crop2d(ops.pad2d(x, 1, 1), 5, 4), (2, 3, 5, 4)), [x]),
        "softmax": (weighted(lambda: ops.softmax_rows(t), (4, 5)), [t]),
        "l2_normalize": (weighted(lambda: ops.l2_normalize_rows(t), (4, 5)), [t]),
        "layer_norm": (weighted(lambda: ops.layer_norm(t, lg, lb), (4, 5)), [t, lg, lb]),
        "batch_norm_train": (weighted(lambda: ops.BatchNormTrain.apply(x, g, b, eps=1e-5), (2, 3, 6, 6)), [x, g, b]),
        "batch_norm_eval": (weighted(lambda: ops.BatchNormEval.apply(x, g, b, mean=np.full(3, 0.1), var=np.full(3, 2.0), eps=1e-5), (2, 3, 6, 6)), [x, g, b]),
        "sigmoid": (weighted(lambda: ops.sigmoid(t), (4, 5)), [t]),
        "silu": (weighted(lambda: ops.silu(t), (4, 5)), [t]),
        "gelu": (weighted(lambda: ops.gelu(t), (4, 5)), [t]),
        "conv_standard": (weighted(lambda: ops.conv2d(x, kernel, "standard", 2, 1), (2, 4, 3, 3)), [x, kernel]),
        "conv_depthwise": (weighted(lambda: ops.conv2d(x, dw, "depthwise", 1, 1), (2, 3, 6, 6)), [x, dw]),
        "conv_pointwise": (weighted(lambda: ops.conv2d(x, pw, "pointwise", 2, 0), (2, 4, 3, 3)), [x, pw]),
        "cross_entropy": (lambda: ops.cross_entropy(t, [0, 4, 2, 1]), [t]),
    }
    return cases


@pytest.mark.parametrize("seed", range(20))
def test_every_primitive_gradient(seed):
    rng = np.random.default_rng(seed)
    with default_dtype(np.float64):
        for name, (loss, inputs) in _primitive_cases(rng).items():
            for inp in inputs:
                err = finite_diff_check(loss, inp)
                assert err < 1e-4, f"{name}: {err}"


def test_relu_gradient_away_from_kink():
    x = f64([-2.0, -0.5, 0.5, 3.0])
    assert finite_diff_check(lambda: ops.sum(ops.mul(ops.relu(x), x)), x) < 1e-6


def test_frozen_forward_is_thread_safe():
    rng = np.random.default_rng(0)
    w = Parameter(rng.normal(size=(8, 8)))
    xs = [Tensor(rng.normal(size=(4, 8))) for _ in range(8)]
    expected = [ops.softmax_rows(ops.matmul(x, w)).data for x in xs]
    results = [None] * len(xs)

    def run(i):
        for _ in range(20):
            results[i] = ops.softmax_rows(ops.matmul(xs[i], w)).data

    threads = [threading.Thread(target=run, args=(i,)) for i in range(len(xs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for r, e in zip(results, expected):
        np.testing.assert_array_equal(r, e)
