import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from samgpt import align
from samgpt import tensor as T
from samgpt.tensor import Tensor

from conftest import max_grad_error
from oracles import gram_projection


def test_dal_diagonal():
    out = align.fit_dal(np.diag([3.0, 2.0]), 1)
    assert np.allclose(out, [[3.0], [0.0]], atol=1e-15)


def test_dal_preserves_gram_when_full_rank(rng):
    X = rng.normal(size=(7, 4))
    out = align.fit_dal(X, 6)
    assert out.shape == (7, 6)
    assert np.max(np.abs(out @ out.T - X @ X.T)) < 1e-8
    assert np.all(out[:, 4:] == 0)  # zero padding beyond the rank


def test_dal_matches_eigen_oracle(rng):
    X = rng.normal(size=(6, 4))
    assert np.max(np.abs(align.fit_dal(X, 2) - gram_projection(X, 2))) < 1e-8


@settings(max_examples=30, deadline=None)
@given(n=st.integers(2, 9), d=st.integers(1, 9), k=st.integers(1, 6), seed=st.integers(0, 2**31))
def test_dal_gram_oracle_property(n, d, k, seed):
    X = np.random.default_rng(seed).normal(size=(n, d))
    out = align.fit_dal(X, k)
    r = min(k, n, d)
    assert out.shape == (n, k)
    assert np.max(np.abs(out[:, :r] - gram_projection(X, r))) < 1e-8
    G = out.T @ out
    assert np.max(np.abs(G - np.diag(np.diag(G)))) < 1e-8  # orthogonal columns
    assert np.all(np.diff(np.linalg.norm(out[:, :r], axis=0)) <= 1e-12)  # descending singular values


def test_dal_rank_deficient_pads(rng):
    X = np.outer(rng.normal(size=5), rng.normal(size=8))
    out = align.fit_dal(X, 3)
    assert np.all(out[:, 1:] == 0) and np.linalg.norm(out[:, 0]) > 0


def test_dal_rejects_non_finite():
    with pytest.raises(ValueError):
        align.fit_dal(np.array([[1.0, np.nan]]), 2)


def test_dal_cache_roundtrip(tmp_path, rng):
    X = rng.normal(size=(5, 4))
    a = align.cached_fit_dal(X, 3, tmp_path, "abc")
    key = align.dal_cache_key("abc", 3)
    _, manifest = T.load_tensors(tmp_path / key)
    assert manifest["cache_key"] == key
    b = align.cached_fit_dal(np.zeros((5, 4)), 3, tmp_path, "abc")  # served from cache
    assert np.array_equal(a, b)


def test_fal_identities(rng):
    X = rng.normal(size=(4, 3))
    toks = align.FeatureTokens.init(2, 3)
    assert np.array_equal(align.apply_fal(1, X, toks).data, X)
    toks.tokens[0].data[:] = [[2.0, 0.0, 0.0]]
    out = align.apply_fal(0, X, toks).data
    assert np.array_equal(out[:, 0], 2 * X[:, 0]) and np.all(out[:, 1:] == 0)
    with pytest.raises(IndexError):
        align.apply_fal(2, X, toks)
    with pytest.raises(T.ShapeError):
        align.apply_fal(0, rng.normal(size=(4, 5)), toks)


def test_fal_gradient_fd(rng):
    X = rng.normal(size=(5, 3))
    toks = align.FeatureTokens.init(2, 3)
    toks.tokens[1].data[:] = rng.uniform(-1, 1, (1, 3))
    w = Tensor(rng.normal(size=(5, 3)))
    f = lambda: T.sum_all(T.mul(T.exp(align.apply_fal(1, X, toks)), w))  # noqa: E731
    assert max_grad_error(f, [toks.tokens[1]]) < 1e-5


def test_fad_identities(rng):
    X = rng.normal(size=(4, 3))
    toks = align.FeatureTokens.init(3, 3)
    for t in toks.tokens:
        t.data[:] = rng.normal(size=(1, 3))
    ad = align.FeatureAdapter.init(3, 3)
    ad.mixture.data[:] = [[1.0, 0.0, 0.0]]
    assert np.array_equal(align.apply_fad(X, ad, toks).data, align.apply_fal(0, X, toks).data)
    ad.mixture.data[:] = 0.0
    ad.offset.data[:] = 1.0
    assert np.array_equal(align.apply_fad(X, ad, toks).data, X)


def test_fad_gradients_reach_adapter_only(rng):
    X = rng.normal(size=(5, 3))
    toks = align.FeatureTokens.init(2, 3)
    for t in toks.tokens:
        t.data[:] = rng.normal(size=(1, 3))
    ad = align.FeatureAdapter.init(2, 3)
    ad.offset.data[:] = rng.normal(size=(1, 3))
    w = Tensor(rng.normal(size=(5, 3)))
    f = lambda: T.sum_all(T.mul(T.exp(align.apply_fad(X, ad, toks)), w))  # noqa: E731
    assert max_grad_error(f, ad.parameters()) < 1e-5
    assert all(t.grad is None or not t.grad.any() for t in toks.tokens)


def test_fad_shape_mismatch():
    toks = align.FeatureTokens.init(2, 3)
    with pytest.raises(T.ShapeError):
        align.apply_fad(np.ones((2, 3)), align.FeatureAdapter.init(3, 3), toks)
