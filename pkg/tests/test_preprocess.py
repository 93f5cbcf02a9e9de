import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsaflow.imageio import ImageSeries
from dsaflow.preprocess import (
    DataMatrix,
    WhiteningError,
    center,
    devectorize,
    vectorize,
    whiten,
)


def _cov_oracle(rows):
    # explicit double loop, population normalization
    p, n = rows.shape
    means = [sum(rows[i]) / n for i in range(p)]
    out = np.empty((p, p))
    for i in range(p):
        for j in range(p):
            out[i, j] = np.dot(rows[i] - means[i], rows[j] - means[j]) / n
    return out


def test_vectorize_row_major():
    s = ImageSeries(np.array([[[0.1, 0.2], [0.3, 0.4]]]))
    m = vectorize(s)
    np.testing.assert_array_equal(m.values, [[0.1, 0.2, 0.3, 0.4]])
    assert m.shape == (2, 2)


def test_vectorize_shape():
    s = ImageSeries(np.zeros((3, 128, 128)))
    assert vectorize(s).values.shape == (3, 16384)


def test_devectorize_round_trip():
    rng = np.random.default_rng(1)
    s = ImageSeries(rng.random((4, 5, 7)))
    m = vectorize(s)
    for r in range(4):
        assert np.array_equal(devectorize(m.values[r], 5, 7), s.frames[r])


def test_devectorize_examples():
    np.testing.assert_array_equal(devectorize([1, 2, 3, 4], 2, 2), [[1, 2], [3, 4]])
    assert not devectorize(np.zeros(6), 2, 3).any()
    v = np.random.default_rng(2).random(6)
    img = devectorize(v, 2, 3)
    for k in range(6):
        assert img[k // 3, k % 3] == v[k]
    with pytest.raises(ValueError):
        devectorize(v, 2, 2)


def test_data_matrix_rejects_nonfinite():
    with pytest.raises(ValueError):
        DataMatrix(np.array([[np.nan, 0.0]]), (1, 2))


def test_center_examples():
    same = np.tile(np.arange(5.0), (2, 1))
    c, mean = center(same)
    assert not c.any()
    np.testing.assert_array_equal(mean, np.arange(5.0))
    c, _ = center(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    np.testing.assert_array_equal(c, [[-0.5] * 3, [0.5] * 3])
    x = np.random.default_rng(3).random((5, 10))
    c, _ = center(x)
    assert np.all(np.abs(c.sum(axis=0) / 5) < 1e-12)
    with pytest.raises(ValueError):
        center(np.zeros((1, 4)))


def test_center_data_matrix():
    s = ImageSeries(np.random.default_rng(0).random((3, 4, 4)))
    c, mean = center(vectorize(s))
    assert isinstance(c, DataMatrix)
    assert mean.shape == (16,)


def test_whiten_already_white():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 5000))
    # make the sample covariance exactly identity
    x -= x.mean(axis=1, keepdims=True)
    l, e = np.linalg.eigh(x @ x.T / x.shape[1])
    x = (e / np.sqrt(l)) @ e.T @ x
    z, t = whiten(x, 4)
    assert np.max(np.abs(_cov_oracle(z) - np.eye(4))) <= 1e-8
    np.testing.assert_allclose(t.eigenvalues, 1.0, atol=1e-10)


def test_whiten_rank_deficient():
    rng = np.random.default_rng(5)
    x = np.outer(rng.random(3), rng.random(200))
    with pytest.raises(WhiteningError, match="rank deficient"):
        whiten(x, 2)


def test_whiten_p_too_large():
    with pytest.raises(WhiteningError):
        whiten(np.random.default_rng(0).random((4, 50)), 5)
    with pytest.raises(WhiteningError):
        whiten(np.random.default_rng(0).random((4, 50)), 0)


def test_whiten_random_full_rank_oracle():
    x = np.random.default_rng(6).random((6, 1000))
    z, t = whiten(x, 3)
    assert z.shape == (3, 1000)
    assert t.projection.shape == (3, 6)
    assert np.max(np.abs(_cov_oracle(z) - np.eye(3))) <= 1e-8
    assert np.all(np.diff(t.eigenvalues) <= 0)


def test_whiten_after_center_loses_one_rank():
    x = np.random.default_rng(7).random((5, 400))
    c, mean = center(x)
    whiten(c, 4, mean=mean)
    with pytest.raises(WhiteningError):
        whiten(c, 5, mean=mean)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31 - 1), st.data())
def test_whitening_identity_property(d, seed, data):
    p = data.draw(st.integers(1, d))
    x = np.random.default_rng(seed).standard_normal((d, 300))
    z, t = whiten(x, p)
    assert np.max(np.abs(_cov_oracle(z) - np.eye(p))) <= 1e-8
    assert np.all(np.diff(t.eigenvalues) <= 0)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 10), st.integers(0, 2 ** 31 - 1), st.data())
def test_reconstruction_is_top_p_projection(d, seed, data):
    p = data.draw(st.integers(1, d - 1))
    x = np.random.default_rng(seed).random((d, 200))
    c, mean = center(x)
    z, t = whiten(c, p, mean=mean)
    # oracle: SVD of the doubly-centered data
    xc = c - c.mean(axis=1, keepdims=True)
    u, _, _ = np.linalg.svd(xc, full_matrices=False)
    proj = u[:, :p] @ u[:, :p].T @ xc
    recon = t.reconstruct(z) - mean[None, :] - t.row_mean[:, None]
    assert np.linalg.norm(recon - proj) <= 1e-6 * max(np.linalg.norm(proj), 1e-12)


def test_apply_matches_whitened():
    x = np.random.default_rng(8).random((6, 300))
    c, mean = center(x)
    z, t = whiten(c, 3, mean=mean)
    np.testing.assert_allclose(t.apply(x), z, atol=1e-12)
