import struct

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from samgpt import tensor as T
from samgpt.tensor import Tensor

from conftest import autodiff_grads, max_grad_error, numeric_grad, rel_error
from oracles import dense_adjacency


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity_and_hand_values():
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(T.matmul(Tensor(np.eye(2)), Tensor(X)).data, X)
    out = T.matmul(Tensor([[1.0, 2], [3, 4]]), Tensor([[5.0], [6]]))
    assert np.array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_fd(rng):
    a, b = leaf(rng.uniform(-1, 1, (4, 3))), leaf(rng.uniform(-1, 1, (3, 2)))
    w = rng.uniform(-1, 1, (4, 2))
    assert max_grad_error(lambda: T.sum_all(T.mul(T.matmul(a, b), Tensor(w))), [a, b]) < 1e-5


# --- spmm -----------------------------------------------------------------

def test_spmm_identity(rng):
    x = rng.normal(size=(5, 3))
    assert np.array_equal(T.spmm(sp.identity(5, format="csr"), Tensor(x)).data, x)


def test_spmm_triangle_neighbour_mean():
    A = dense_adjacency(3, [(0, 1), (1, 2), (0, 2)])
    mean_adj = sp.csr_matrix(A / A.sum(axis=1, keepdims=True))
    y = T.spmm(mean_adj, Tensor(np.eye(3))).data
    expected = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    assert np.allclose(y, expected, atol=1e-15)


def test_spmm_gradient_matches_dense(rng):
    M = rng.uniform(-1, 1, (6, 6)) * (rng.random((6, 6)) < 0.5)
    x1, x2 = leaf(rng.uniform(-1, 1, (6, 3))), leaf(np.zeros((6, 3)))
    x2.data[:] = x1.data
    w = Tensor(rng.uniform(-1, 1, (6, 3)))
    T.backward(T.sum_all(T.mul(T.spmm(sp.csr_matrix(M), x1), w)))
    T.backward(T.sum_all(T.mul(T.matmul(Tensor(M), x2), w)))
    assert rel_error(x1.grad, x2.grad) < 1e-8


def test_spmm_index_out_of_range():
    with pytest.raises(IndexError):
        T.spmm(sp.identity(4, format="csr"), Tensor(np.ones((3, 2))))


# --- elementwise ----------------------------------------------------------

def test_mul_by_ones_is_bit_exact(rng):
    x = rng.normal(size=(7, 5)) * 1e3
    assert np.array_equal(T.mul(Tensor(x), Tensor(np.ones((1, 5)))).data, x)


def test_relu_values_and_subgradient():
    x = leaf([[-1.0, 0.0, 2.0]])
    y = T.relu(x)
    assert np.array_equal(y.data, [[0.0, 0.0, 2.0]])
    T.backward(T.sum_all(y))
    assert np.array_equal(x.grad, [[0.0, 0.0, 1.0]])


def test_broadcast_mul_gradient_fd(rng):
    x, row, col = leaf(rng.uniform(-1, 1, (4, 3))), leaf(rng.uniform(-1, 1, (1, 3))), leaf(rng.uniform(-1, 1, (4, 1)))
    w = Tensor(rng.uniform(-1, 1, (4, 3)))
    f = lambda: T.sum_all(T.mul(T.mul(T.mul(x, row), col), w))  # noqa: E731
    assert max_grad_error(f, [x, row, col]) < 1e-5


def test_incompatible_broadcast():
    with pytest.raises(T.ShapeError):
        T.add(Tensor(np.ones((3, 2))), Tensor(np.ones((2, 2))))
    with pytest.raises(T.ShapeError):
        T.mul(Tensor(np.ones((3, 2))), Tensor(np.ones((1, 3))))


# --- reductions -----------------------------------------------------------

def test_mean_rows_and_cosine_examples():
    assert np.array_equal(T.mean_rows(Tensor([[1.0, 3], [3, 5]])).data, [[2.0, 4.0]])
    assert T.cosine_sim(Tensor([[1.0, 0]]), Tensor([[0.0, 1]])).item() == 0.0
    v = np.array([[0.3, -1.2, 2.0]])
    assert T.cosine_sim(Tensor(v), Tensor(3 * v)).item() == pytest.approx(1.0, abs=1e-15)


def test_cosine_zero_norm_rejected():
    with pytest.raises(ZeroDivisionError):
        T.cosine_sim(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]]))


# --- backward -------------------------------------------------------------

def test_sum_gives_ones():
    x = leaf(np.arange(12.0).reshape(3, 4))
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_cosine_chain_gradient_fd(rng):
    a, b = leaf(rng.uniform(-1, 1, (1, 5))), leaf(rng.uniform(-1, 1, (1, 5)))
    f = lambda: T.exp(T.scalar_mul(T.cosine_sim(a, b), 2.0))  # noqa: E731
    assert max_grad_error(f, [a, b]) < 1e-5


def test_backward_accumulates(rng):
    x = leaf(rng.uniform(-1, 1, (3, 2)))
    f = lambda: T.sum_all(T.mul(x, x))  # noqa: E731
    T.backward(f())
    once = x.grad.copy()
    T.backward(f())
    assert np.array_equal(x.grad, 2 * once)


def test_backward_needs_scalar():
    with pytest.raises(T.ShapeError):
        T.backward(T.mul(leaf(np.ones((2, 2))), Tensor(np.ones((2, 2)))))


def test_frozen_tensor_gets_no_grad(rng):
    w = leaf(rng.uniform(-1, 1, (3, 3))).freeze()
    x = leaf(rng.uniform(-1, 1, (2, 3)))
    before = w.data.copy()
    T.backward(T.sum_all(T.matmul(x, w)))
    assert w.grad is None and np.array_equal(w.data, before)


def test_tape_records_every_reachable_op(rng):
    x = leaf(rng.uniform(-1, 1, (2, 2)))
    loss = T.sum_all(T.relu(T.matmul(x, x)))
    tape = T.Tape.from_loss(loss)
    assert len(tape) == 3
    assert [r._seq for r in tape.records] == sorted(r._seq for r in tape.records)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(6, 4))
    f = lambda: T.cosine_matrix(T.relu(T.matmul(Tensor(x), Tensor(x.T))), Tensor(x @ x.T)).data  # noqa: E731
    assert np.array_equal(f(), f())


# --- every primitive against finite differences (property) ---------------

UNARY = {
    "relu": T.relu,
    "exp": T.exp,
    "log": lambda a: T.log(T.add(T.mul(a, a), Tensor(np.full(a.shape, 0.5)))),
    "transpose": T.transpose,
    "sum_rows": T.sum_rows,
    "mean_rows": T.mean_rows,
    "l2_normalize_rows": T.l2_normalize_rows,
    "take_rows": lambda a: T.take_rows(a, [0, 0, a.shape[0] - 1]),
    "concat_rows": lambda a: T.concat_rows([a, T.scalar_mul(a, 2.0)]),
    "scalar_mul": lambda a: T.scalar_mul(a, -1.7),
}


@settings(max_examples=25, deadline=None)
@given(op=st.sampled_from(sorted(UNARY)), n=st.integers(1, 4), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_unary_ops_match_fd(op, n, d, seed):
    r = np.random.default_rng(seed)
    x = leaf(r.uniform(-1, 1, (n, d)))
    if op == "l2_normalize_rows":
        x.data += np.sign(x.data) * 0.1  # keep rows away from zero norm
    w = None

    def f():
        y = UNARY[op](x)
        return T.sum_all(T.mul(y, w))

    w = Tensor(r.uniform(-1, 1, UNARY[op](x).shape))
    if op == "relu":
        near = np.abs(x.data) < 1e-3
        x.data[near] = r.uniform(1e-3, 1, near.sum()) * np.where(r.random(near.sum()) < 0.5, -1, 1)
    (auto,) = autodiff_grads(f, [x])
    assert rel_error(auto, numeric_grad(f, x)) < 1e-5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 4), m=st.integers(1, 4), d=st.integers(1, 4), seed=st.integers(0, 2**31))
def test_binary_ops_match_fd(n, m, d, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r.uniform(-1, 1, (n, d))), leaf(r.uniform(-1, 1, (m, d)))
    a.data += np.sign(a.data) * 0.1
    b.data += np.sign(b.data) * 0.1
    row = leaf(r.uniform(-1, 1, (1, d)))
    wa = Tensor(r.uniform(-1, 1, (n, m)))
    wb = Tensor(r.uniform(-1, 1, (n, d)))

    def f():
        c = T.cosine_matrix(a, b)
        e = T.sub(T.add(a, row), T.mul(a, row))
        return T.add(T.sum_all(T.mul(c, wa)), T.sum_all(T.mul(e, wb)))

    assert max_grad_error(f, [a, b, row]) < 1e-5


# --- serialization --------------------------------------------------------

def test_tensor_file_layout(tmp_path, rng):
    x = rng.normal(size=(3, 2))
    T.write_tensor(tmp_path / "x.bin", x)
    raw = (tmp_path / "x.bin").read_bytes()
    assert struct.unpack_from("<QQQ", raw, 0) == (2, 3, 2)
    assert np.array_equal(np.frombuffer(raw[24:], dtype="<f8").reshape(3, 2), x)
    assert np.array_equal(T.read_tensor(tmp_path / "x.bin"), x)


def test_save_load_manifest(tmp_path, rng):
    arrays = {"encoder/W0": rng.normal(size=(4, 3)), "tok": rng.normal(size=(1, 3))}
    T.save_tensors(tmp_path / "ck", arrays, extra={"note": 1})
    back, manifest = T.load_tensors(tmp_path / "ck")
    assert manifest["note"] == 1
    assert manifest["tensors"]["encoder/W0"]["shape"] == [4, 3]
    for k, v in arrays.items():
        assert np.array_equal(back[k], v)


def test_truncated_tensor_file(tmp_path):
    T.write_tensor(tmp_path / "x.bin", np.ones((2, 2)))
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        T.read_tensor(tmp_path / "x.bin")
