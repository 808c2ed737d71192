"""Autodiff core: primitive semantics, backward, gradcheck, TACT format."""
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tempalign import tensor as T
from tempalign.checks import PRIMITIVES, SMOOTH_TOL, _instances, primitive_checks
from tempalign.gradcheck import gradcheck
from tempalign.tensor import Graph, NonFiniteError, ShapeError, Tensor, backward

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_identity_kernel_conv_leaves_input_unchanged(rng):
    x = rng.standard_normal((1, 1, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), None, stride=1, padding=0)
    np.testing.assert_array_equal(out.data, x)


def test_add_zeros_and_matmul_identity():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.add(x, T.zeros_like(x)).data, x.data)
    np.testing.assert_array_equal(T.matmul(x, Tensor(np.eye(2))).data, x.data)


def test_conv2d_matches_direct_loop(rng):
    x = rng.standard_normal((2, 3, 6, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_blur_pool_equals_fixed_stride2_conv(rng):
    x = rng.standard_normal((2, 3, 8, 6))
    k = np.outer([1, 2, 1], [1, 2, 1]) / 16.0
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c] = k
    ref = T.conv2d(Tensor(x), Tensor(w), None, stride=2, padding=1).data
    np.testing.assert_allclose(T.blur_pool(Tensor(x)).data, ref, atol=1e-14)
    with pytest.raises(ShapeError):
        T.blur_pool(Tensor(np.zeros((1, 1, 5, 4))))


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


def test_no_implicit_broadcasting():
    with pytest.raises(ShapeError):
        T.mul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((1, 3))))


def test_non_finite_output_is_an_error():
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_backward_sum_gives_ones():
    x = Tensor(np.arange(4.0).reshape(2, 2), requires_grad=True, name="x")
    g = backward(T.sum(x), {"x": x})
    np.testing.assert_array_equal(g["x"], np.ones((2, 2)))


def test_backward_square_at_two():
    x = Tensor([2.0], requires_grad=True, name="x")
    g = backward(T.mean(T.mul(x, x)), {"x": x})
    np.testing.assert_allclose(g["x"], [4.0])


def test_backward_rejects_non_scalar_and_zero_fills_unreached():
    x = Tensor(np.ones(3), requires_grad=True, name="x")
    y = Tensor(np.ones((2, 2)), requires_grad=True, name="y")
    with pytest.raises(ShapeError):
        backward(T.scale(x, 2.0), {"x": x})
    g = backward(T.sum(x), {"x": x, "y": y})
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))
    assert g["y"].shape == y.shape


def test_graph_records_each_primitive_once():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    with Graph() as g:
        T.sum(T.relu(T.add(a, a)))
    assert g.ops() == ["add", "relu", "sum"]
    assert g.count("relu") == 1


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite))
def test_adjoint_linearity(a_np, b_np):
    # grad of (f + g) equals grad f + grad g
    x = Tensor(a_np, requires_grad=True, name="x")
    w = Tensor(b_np)
    f = T.sum(T.mul(x, w))
    h = T.mean(T.tanh(T.scale(x, 1e-3)))
    both = backward(T.add(f, h), {"x": x})["x"]
    sep = backward(f, {"x": x})["x"] + backward(h, {"x": x})["x"]
    np.testing.assert_allclose(both, sep, rtol=1e-12, atol=1e-15)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    w = rng.standard_normal((4, 3, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), None, 1, 1).data
    assert a.tobytes() == b.tobytes()


def test_relu_subgradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True, name="x")
    g = backward(T.sum(T.relu(x)), {"x": x})["x"]
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    fn, sampler = PRIMITIVES[name]
    res = _instances(name, fn, sampler, SMOOTH_TOL)
    assert res.passed, res.line()


def test_gradcheck_examples(rng):
    assert gradcheck(T.sigmoid, [rng.uniform(-2, 2, 16)], tol=1e-7).passed
    x, w = rng.standard_normal((1, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3))
    assert gradcheck(lambda a, b: T.conv2d(a, b, None, 1, 1), [x, w], tol=1e-6).passed
    r = rng.uniform(0.1, 2.0, 16) * rng.choice([-1, 1], 16)
    assert gradcheck(T.relu, [r], tol=1e-7).passed


def test_gradcheck_detects_a_wrong_gradient():
    def bad_square(x):
        return T._make("bad", x.data ** 2, (x,), lambda g: (g * x.data,))  # missing factor 2
    rep = gradcheck(bad_square, [np.array([1.0, -2.0, 3.0])], tol=1e-4)
    assert not rep.passed and rep.max_rel_err > 0.1


def test_gradcheck_resamples_at_kinks():
    calls = []

    def sampler(r):
        calls.append(1)
        return [np.zeros(4)] if len(calls) == 1 else [r.uniform(0.5, 1.0, 4)]
    rep = gradcheck(T.relu, sampler=sampler, tol=1e-7)
    assert rep.passed and rep.attempts == 2 and rep.kinks


def test_primitive_suite_summary():
    assert all(r.passed for r in primitive_checks())


@given(st.sampled_from([np.float32, np.float64]),
       st.lists(st.integers(1, 4), min_size=0, max_size=4), st.integers(0, 2 ** 31))
def test_tact_roundtrip(dtype, shape, seed):
    arr = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    t, end = T.loads_tensor(T.dumps_tensor(arr))
    assert t.dtype == arr.dtype and t.shape == arr.shape
    assert t.data.tobytes() == arr.tobytes()
    assert end == 8 + 8 * len(shape) + arr.nbytes


def test_tact_header_layout():
    buf = T.dumps_tensor(np.zeros((2, 3), np.float32))
    assert buf[:4] == b"TACT"
    version, tag, rank = struct.unpack_from("<HBB", buf, 4)
    assert (version, tag, rank) == (1, 0, 2)
    assert struct.unpack_from("<2Q", buf, 8) == (2, 3)
    with pytest.raises(ValueError, match="magic"):
        T.loads_tensor(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="truncated"):
        T.loads_tensor(buf[:-1])


def test_tact_file_roundtrip(tmp_path, rng):
    arr = rng.standard_normal((3, 2))
    T.dump_tensor(arr, tmp_path / "a.tact")
    np.testing.assert_array_equal(T.load_tensor(tmp_path / "a.tact").data, arr)
