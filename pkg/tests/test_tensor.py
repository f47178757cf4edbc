import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gradsuite import CASES, check_op
from stylelab import tensor as T
from stylelab.errors import ContractError, DimensionError, FormatError

finite = st.floats(-50, 50, allow_nan=False, width=64)


def test_matmul_identity():
    a = T.Tensor(np.eye(2))
    b = T.Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_projector():
    out = T.matmul(T.Tensor([[1.0, 0.0], [0.0, 0.0]]), T.Tensor([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(4, 3\).*\(2, 5\)"):
        T.matmul(T.Tensor(np.ones((4, 3))), T.Tensor(np.ones((2, 5))))


def test_matmul_backward_matches_closed_form(f64):
    rng = np.random.default_rng(0)
    a = T.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = T.Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    g = rng.normal(size=(4, 5))
    T.backward(T.tsum(T.mul(T.matmul(a, b), T.Tensor(g))))
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_matmul_finite_difference():
    assert check_op("matmul", 0) < 1e-5


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    big = T.softmax_rows(T.Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(big))
    np.testing.assert_allclose(big, [[1.0, 0.0]], atol=1e-7)
    e = np.exp([1.0, 2.0, 3.0])
    oracle = e / e.sum()
    np.testing.assert_allclose(T.softmax_rows(T.Tensor([[1.0, 2.0, 3.0]])).data[0], oracle, atol=1e-5)
    np.testing.assert_allclose(oracle, [0.09003, 0.24473, 0.66524], atol=1e-5)


def test_softmax_rows_rejects_non_matrix():
    with pytest.raises(DimensionError):
        T.softmax_rows(T.Tensor(np.zeros((2, 2, 2))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 7)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax_rows(T.Tensor(x.astype(np.float32))).data
    assert np.all(s >= 0)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-6)


def test_cosine_examples():
    v = T.Tensor([0.3, -2.0, 5.0])
    assert T.cosine(v, v).item() == pytest.approx(1.0, abs=1e-6)
    assert T.cosine(v, T.scale(v, -1.0)).item() == pytest.approx(-1.0, abs=1e-6)
    assert T.cosine(T.Tensor([1.0, 0.0]), T.Tensor([1.0, 1.0])).item() == pytest.approx(0.70711, abs=1e-5)


def test_cosine_zero_norm_and_shape_error():
    assert T.cosine(T.Tensor(np.zeros(3)), T.Tensor([1.0, 2.0, 3.0])).item() == 0.0
    with pytest.raises(DimensionError):
        T.cosine(T.Tensor(np.zeros(3)), T.Tensor(np.zeros(4)))


def test_cosine_flattens_matrices():
    a = np.arange(6.0).reshape(2, 3) + 1
    b = a[::-1].copy()
    flat = a.ravel() @ b.ravel() / (np.linalg.norm(a) * np.linalg.norm(b))
    assert T.cosine(T.Tensor(a), T.Tensor(b)).item() == pytest.approx(flat, rel=1e-6)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite))
def test_cosine_bounded(a, b):
    c = T.cosine(T.Tensor(a), T.Tensor(b)).item()
    assert -1 - 1e-9 <= c <= 1 + 1e-9


def test_backward_square_sum():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    T.backward(T.tsum(T.mul(w, w)))
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_constant_loss_gives_zero_grads():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.Tensor([3.0, 4.0]))
    T.backward(loss, inputs=[w])
    np.testing.assert_array_equal(w.grad, [0.0, 0.0])


def test_backward_accumulates_until_zeroed():
    w = T.Tensor([1.0, -1.0], requires_grad=True)
    for _ in range(2):
        T.backward(T.tsum(T.scale(w, 3.0)))
    np.testing.assert_allclose(w.grad, [6.0, 6.0])
    w.zero_grad()
    T.backward(T.tsum(T.scale(w, 3.0)))
    np.testing.assert_allclose(w.grad, [3.0, 3.0])


def test_backward_non_scalar_is_contract_error():
    w = T.Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.scale(w, 2.0))


def test_graph_is_topological_and_grad_shapes_match():
    rng = np.random.default_rng(1)
    x = T.Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    h = T.silu(T.matmul(x, w))
    loss = T.tsum(T.mul(h, h))
    graph = T.ComputeGraph.trace(loss)
    pos = {id(n): i for i, n in enumerate(graph.nodes)}
    for n in graph.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    T.backward(loss, graph)
    for leaf in graph.leaves():
        assert leaf.grad.shape == leaf.data.shape


def test_no_grad_builds_no_graph():
    w = T.Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = T.scale(w, 2.0)
    assert not y.requires_grad and y.is_leaf


def test_float32_default_and_float64_switch():
    assert T.Tensor([1.0]).data.dtype == np.float32
    with T.precision(np.float64):
        assert T.Tensor([1.0]).data.dtype == np.float64
    assert T.Tensor([1.0]).data.dtype == np.float32


def test_no_broadcasting_beyond_bias():
    with pytest.raises(DimensionError):
        T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 1))))
    with pytest.raises(DimensionError):
        T.mul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones(3)))
    with pytest.raises(DimensionError):
        T.expand(T.Tensor(np.ones((2, 3))), (2, 4))


def test_determinism():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(8, 16)).astype(np.float32)
    w = rng.normal(size=(16, 16)).astype(np.float32)
    outs = [T.layer_norm(T.softmax(T.matmul(T.Tensor(x), T.Tensor(w))), T.Tensor(np.ones(16)),
                         T.Tensor(np.zeros(16))).data for _ in range(2)]
    assert outs[0].tobytes() == outs[1].tobytes()


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(name, seed):
    assert check_op(name, seed) < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 5)), elements=st.floats(-100, 100, width=32)))
def test_ops_stay_finite(x):
    t = T.Tensor(x)
    for out in (T.gelu(t), T.silu(t), T.softmax(t), T.layer_norm(t, T.Tensor(np.ones(x.shape[1])), T.Tensor(np.zeros(x.shape[1])))):
        assert np.all(np.isfinite(out.data))


def test_tensor_file_roundtrip(tmp_path):
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = tmp_path / "x.bin"
    T.save_tensor(path, T.Tensor(x))
    raw = path.read_bytes()
    assert raw[:8] == b"STLTNSR1"
    assert int.from_bytes(raw[8:12], "little") == 3
    np.testing.assert_array_equal(T.load_tensor(path).data, x)


def test_tensor_file_truncation_and_magic():
    buf = io.BytesIO()
    T.write_tensor(buf, np.ones((2, 2), dtype=np.float32))
    raw = buf.getvalue()
    with pytest.raises(FormatError, match="offset"):
        T.read_tensor(io.BytesIO(raw[:-3]))
    with pytest.raises(FormatError):
        T.read_tensor(io.BytesIO(b"XXXXXXXX" + raw[8:]))
