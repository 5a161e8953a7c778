import numpy as np
import pytest

from trackcorr.background import apply_B, apply_B_sqrt, build_B
from trackcorr.kernels import CorrelationModel


@pytest.fixture
def B():
    return build_B(64, 25.0, 1.7, CorrelationModel(10, 200.0))


def test_impulse_gives_first_row(B):
    e = np.zeros(64)
    e[0] = 1.0
    col = apply_B(B, e)
    assert col[0] == pytest.approx(1.7**2, abs=1e-8)
    np.testing.assert_allclose(col, 1.7**2 * B.spectrum.first_row, atol=1e-12)


def test_square_root_dense(B):
    U = apply_B_sqrt(B, np.eye(64))
    np.testing.assert_allclose(U @ U.T, B.to_dense(), atol=1e-8)


def test_symmetric_and_real(B, rng):
    v, w = rng.standard_normal(64), rng.standard_normal(64)
    assert apply_B(B, v) @ w == pytest.approx(v @ apply_B(B, w), rel=1e-12)
    assert np.isrealobj(apply_B(B, v))


def test_shift_equivariance(B, rng):
    v = rng.standard_normal(64)
    np.testing.assert_allclose(apply_B(B, np.roll(v, 5)), np.roll(apply_B(B, v), 5), atol=1e-12)


def test_odd_size():
    B = build_B(45, 30.0, 1.0, CorrelationModel(4, 150.0))
    U = B.apply_sqrt(np.eye(45))
    np.testing.assert_allclose(U @ U.T, B.to_dense(), atol=1e-10)


def test_spectrum_mean_and_white_limit():
    B = build_B(1600, 25.0, 1.0, CorrelationModel(10, 250.0))
    assert B.spectrum.eigenvalues.mean() == pytest.approx(1.0, abs=1e-10)
    W = build_B(16, 25.0, 2.0, None)
    np.testing.assert_array_equal(W.spectrum.eigenvalues, 1.0)
    np.testing.assert_allclose(W.to_dense(), 4.0 * np.eye(16), atol=1e-14)


def test_sampling(B, rng):
    x = apply_B_sqrt(B, rng.standard_normal((64, 100_000)))
    np.testing.assert_allclose(np.mean(x * x, axis=1), 1.7**2, rtol=0.03)


def test_guards():
    with pytest.raises(ValueError, match="shorter"):
        build_B(10, 25.0, 1.0, CorrelationModel(10, 250.0))
    with pytest.raises(ValueError):
        build_B(10, 25.0, 0.0, None)
    with pytest.raises(ValueError):
        build_B(1, 25.0, 1.0, None)
    with pytest.raises(ValueError):
        build_B(64, 25.0, 1.0, None).apply(np.ones(63))
